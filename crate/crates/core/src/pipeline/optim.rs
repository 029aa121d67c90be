//! Adam / AdamW and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled weight decay; zero gives plain Adam.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// `base_lr * gamma^floor(step / interval)`.
pub fn lr_schedule(step: u64, base_lr: f64, gamma: f64, interval: u64) -> f64 {
    base_lr * gamma.powi((step / interval.max(1)) as i32)
}

/// Bias-corrected Adam with optional decoupled weight decay over a fixed,
/// named parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub params: Vec<(String, Tensor)>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(params: Vec<(String, Tensor)>, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Self { cfg, params, m, v, t: 0 }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|(_, p)| p.zero_grad());
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, lr: f32) -> Result<()> {
        self.t += 1;
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (name, p)) in self.params.iter().enumerate() {
            if !p.is_leaf() {
                return Err(Error::InvalidArgument(format!("parameter {name} is not a leaf")));
            }
            let grad = p.grad_ref();
            let zeros;
            let g: &[f32] = match grad.as_ref() {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; p.numel()];
                    &zeros
                }
            };
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Diverged { step: self.t, msg: format!("non-finite gradient in {name}[{j}]") });
            }
            let mut w = p.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..w.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                w[k] -= lr * (mh / (vh.sqrt() + eps) + wd * w[k]);
            }
        }
        Ok(())
    }

    /// Stores moments and the step counter under `prefix`.
    pub fn save_state(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            ck.insert(&format!("{prefix}.m.{name}"), p.shape(), self.m[i].clone())?;
            ck.insert(&format!("{prefix}.v.{name}"), p.shape(), self.v[i].clone())?;
        }
        ck.insert_u64(&format!("{prefix}.t"), self.t)
    }

    pub fn load_state(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for (i, (name, p)) in self.params.iter().enumerate() {
            self.m[i] = ck.get_shaped(&format!("{prefix}.m.{name}"), p.shape())?.to_vec();
            self.v[i] = ck.get_shaped(&format!("{prefix}.v.{name}"), p.shape())?.to_vec();
        }
        self.t = ck.get_u64(&format!("{prefix}.t"))?;
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(params: &[(String, Tensor)], max_norm: f32) -> f32 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .map(|g| g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>())
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        params.iter().for_each(|(_, p)| p.scale_grad(k));
    }
    norm
}
