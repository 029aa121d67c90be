//! TOML experiment configuration with dotted-key overrides.
//!
//! A file only needs the keys it changes; everything else comes from
//! [`Config::default`]. Overrides use the same dotted paths, e.g.
//! `codec_train.steps=500` or `unet.c_base=8`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::degrade::DegradationSpec;
use super::optim::AdamConfig;
use crate::codec::CodecConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::estimator::UNetConfig;
use crate::losses::{DiscriminatorConfig, LossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Codec,
    Diffusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    /// Training crop length in samples.
    pub segment_len: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub lr_gamma: f64,
    pub lr_interval: u64,
    /// Codec stage only: discriminator updates and the adversarial and
    /// feature-matching terms start at this step.
    pub disc_start: u64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f32,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl TrainConfig {
    pub fn codec() -> Self {
        Self {
            stage: Stage::Codec,
            steps: 250_000,
            batch_size: 16,
            segment_len: 32_768,
            lr: 2e-4,
            adam: AdamConfig { beta1: 0.8, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 },
            lr_gamma: 0.998,
            lr_interval: 2_000,
            disc_start: 0,
            grad_clip: 0.0,
            checkpoint_every: 5_000,
            log_every: 100,
        }
    }

    pub fn diffusion() -> Self {
        Self {
            stage: Stage::Diffusion,
            steps: 100_000,
            batch_size: 36,
            segment_len: 229_376,
            lr: 2e-4,
            adam: AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 },
            lr_gamma: 0.998,
            lr_interval: 2_500,
            disc_start: 0,
            grad_clip: 0.0,
            checkpoint_every: 5_000,
            log_every: 100,
        }
    }

    pub fn validate(&self, expected: Stage) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stage != expected {
            return bad(format!("stage is {:?}, expected {expected:?}", self.stage));
        }
        if self.steps == 0 || self.batch_size == 0 || self.segment_len == 0 || self.lr_interval == 0 {
            return bad(format!("steps, batch_size, segment_len and lr_interval must be positive: {self:?}"));
        }
        if !(self.lr > 0.0) || !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad(format!("lr must be positive and lr_gamma in (0, 1], got {} / {}", self.lr, self.lr_gamma));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || a.weight_decay < 0.0 {
            return bad(format!("invalid optimizer settings {a:?}"));
        }
        if self.grad_clip < 0.0 {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub codec: CodecConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss_weights: LossWeights,
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    /// Degradation used to build training pairs for the diffusion stage.
    pub degradation: DegradationSpec,
    pub codec_train: TrainConfig,
    pub diffusion_train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            codec: CodecConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            loss_weights: LossWeights::default(),
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            degradation: DegradationSpec::default(),
            codec_train: TrainConfig::codec(),
            diffusion_train: TrainConfig::diffusion(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value, path: &str) -> Result<()> {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p)?,
                    None => return Err(Error::Config(format!("unknown key {p}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl Config {
    /// Parses a TOML document layered over the defaults, then applies
    /// `key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Value::try_from(Config::default()).map_err(|e| Error::Config(e.to_string()))?;
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        merge(&mut tree, toml::Value::Table(user), "")?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
            let mut value = parse_scalar(raw.trim());
            for part in key.trim().rsplit('.') {
                let mut t = toml::Table::new();
                t.insert(part.to_string(), value);
                value = toml::Value::Table(t);
            }
            merge(&mut tree, value, "")?;
        }
        let cfg: Config = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.unet.validate()?;
        self.schedule.build()?;
        self.codec_train.validate(Stage::Codec)?;
        self.diffusion_train.validate(Stage::Diffusion)?;
        let (d, m) = (self.codec.quantizer.c_down, self.unet.multiple());
        if d % m != 0 {
            return Err(Error::Config(format!(
                "latent width c_down={d} must be a multiple of 2^stages={m} for the estimator"
            )));
        }
        for (name, t) in [("codec_train", &self.codec_train), ("diffusion_train", &self.diffusion_train)] {
            if t.segment_len % self.codec.length_multiple() != 0 || t.segment_len < self.codec.n_fft {
                return Err(Error::Config(format!(
                    "{name}.segment_len={} must be a multiple of {} and at least n_fft",
                    t.segment_len,
                    self.codec.length_multiple()
                )));
            }
        }
        let latent_len = self.diffusion_train.segment_len / self.codec.length_multiple();
        if !latent_len.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "diffusion_train.segment_len gives latent length {latent_len}, not a multiple of {m}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(Config::from_toml_str(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply() {
        let cfg = Config::from_toml_str(
            "seed = 3\n[unet]\nc_base = 8\n",
            &["codec_train.steps=7".into(), "degradation.kind=\"noise\"".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.unet.c_base, 8);
        assert_eq!(cfg.codec_train.steps, 7);
        assert_eq!(cfg.diffusion_train.batch_size, 36);
        assert_eq!(cfg.degradation.kind, super::super::degrade::DegradeKind::Noise);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml_str("sed = 1", &[]).is_err());
        assert!(Config::from_toml_str("", &["unet.cbase=8".into()]).is_err());
        assert!(Config::from_toml_str("", &["codec_train.steps=0".into()]).is_err());
    }
}
