//! Parameterized layers and parameter bookkeeping.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Conv1dSpec, Conv2dSpec, Tensor};

/// Anything that owns trainable tensors. Names are dotted paths and are
/// the keys used in checkpoints.
pub trait Module {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(prefix, &mut out);
        out
    }

    fn params(&self) -> Vec<Tensor> {
        self.named_params("").into_iter().map(|(_, t)| t).collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }

    fn zero_grad(&self) {
        self.params().iter().for_each(Tensor::zero_grad);
    }
}

/// Joins a dotted prefix with a child name.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push(out: &mut Vec<(String, Tensor)>, prefix: &str, name: &str, t: &Tensor) {
    out.push((join(prefix, name), t.clone()));
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the default for conv and linear layers.
pub fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    Tensor::uniform(shape, -bound, bound, rng).into_param()
}

pub fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).into_param()
}

pub fn ones_param(shape: &[usize]) -> Tensor {
    Tensor::ones(shape).into_param()
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: Conv1dSpec,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, spec: Conv1dSpec, rng: &mut R) -> Self {
        let fan_in = cin / spec.groups.max(1) * k;
        Self {
            weight: uniform_init(&[cout, cin / spec.groups.max(1), k], fan_in, rng),
            bias: Some(uniform_init(&[cout], fan_in, rng)),
            spec,
        }
    }

    /// Stride-1 convolution with "same" zero padding for odd `k`.
    pub fn same<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        Self::new(cin, cout, k, Conv1dSpec::padded(k / 2), rng)
    }

    pub fn zero_init(mut self) -> Self {
        self.weight = zeros_param(self.weight.shape());
        self.bias = self.bias.map(|b| zeros_param(b.shape()));
        self
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv1d(&self.weight, self.bias.as_ref(), self.spec)
    }
}

impl Module for Conv1d {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        push(out, prefix, "weight", &self.weight);
        if let Some(b) = &self.bias {
            push(out, prefix, "bias", b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: Conv1dSpec,
}

impl ConvTranspose1d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, rng: &mut R) -> Self {
        let fan_in = cout * k;
        Self {
            weight: uniform_init(&[cin, cout, k], fan_in, rng),
            bias: Some(uniform_init(&[cout], fan_in, rng)),
            spec: Conv1dSpec { stride, padding, ..Default::default() },
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv_transpose1d(&self.weight, self.bias.as_ref(), self.spec)
    }
}

impl Module for ConvTranspose1d {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        push(out, prefix, "weight", &self.weight);
        if let Some(b) = &self.bias {
            push(out, prefix, "bias", b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: (usize, usize),
        spec: Conv2dSpec,
        rng: &mut R,
    ) -> Self {
        let g = spec.groups.max(1);
        let fan_in = cin / g * k.0 * k.1;
        Self {
            weight: uniform_init(&[cout, cin / g, k.0, k.1], fan_in, rng),
            bias: Some(uniform_init(&[cout], fan_in, rng)),
            spec,
        }
    }

    /// Stride-1 square convolution with "same" zero padding for odd `k`.
    pub fn same<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        Self::new(cin, cout, (k, k), Conv2dSpec::padded(k / 2, k / 2), rng)
    }

    pub fn zero_init(mut self) -> Self {
        self.weight = zeros_param(self.weight.shape());
        self.bias = self.bias.map(|b| zeros_param(b.shape()));
        self
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.spec)
    }
}

impl Module for Conv2d {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        push(out, prefix, "weight", &self.weight);
        if let Some(b) = &self.bias {
            push(out, prefix, "bias", b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: Conv2dSpec,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: (usize, usize), stride: (usize, usize), rng: &mut R) -> Self {
        let fan_in = cout * k.0 * k.1;
        Self {
            weight: uniform_init(&[cin, cout, k.0, k.1], fan_in, rng),
            bias: Some(uniform_init(&[cout], fan_in, rng)),
            spec: Conv2dSpec { stride, ..Default::default() },
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv_transpose2d(&self.weight, self.bias.as_ref(), self.spec)
    }
}

impl Module for ConvTranspose2d {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        push(out, prefix, "weight", &self.weight);
        if let Some(b) = &self.bias {
            push(out, prefix, "bias", b);
        }
    }
}

/// Dense layer acting on the last axis: `x @ W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_init(&[din, dout], din, rng),
            bias: uniform_init(&[dout], din, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        push(out, prefix, "weight", &self.weight);
        push(out, prefix, "bias", &self.bias);
    }
}

/// Layer normalization over the channel axis (axis 1) of `[B, C, ...]`.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
    pub eps: f32,
}

impl ChannelNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Some(ones_param(&[channels])),
            beta: Some(zeros_param(&[channels])),
            eps: 1e-6,
        }
    }

    /// Plain normalization with no affine parameters.
    pub fn plain() -> Self {
        Self { gamma: None, beta: None, eps: 1e-6 }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&[1], self.gamma.as_ref(), self.beta.as_ref(), self.eps)
    }
}

impl Module for ChannelNorm {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        if let Some(g) = &self.gamma {
            push(out, prefix, "gamma", g);
        }
        if let Some(b) = &self.beta {
            push(out, prefix, "beta", b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f32,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Self {
        Self {
            groups: groups.min(channels),
            gamma: ones_param(&[channels]),
            beta: zeros_param(&[channels]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.group_norm(self.groups, Some(&self.gamma), Some(&self.beta), self.eps)
    }
}

impl Module for GroupNorm {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        push(out, prefix, "gamma", &self.gamma);
        push(out, prefix, "beta", &self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_names_are_dotted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv1d::same(2, 3, 3, &mut rng);
        let names: Vec<String> = c.named_params("enc.stem").into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["enc.stem.weight", "enc.stem.bias"]);
        assert_eq!(c.num_params(), 2 * 3 * 3 + 3);
    }

    #[test]
    fn init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(16, 4, &mut rng);
        assert!(l.weight.data().iter().all(|v| v.abs() <= 0.25));
        assert!(l.weight.requires_grad());
    }

    #[test]
    fn group_norm_caps_groups() {
        assert_eq!(GroupNorm::new(8, 4).groups, 4);
    }
}
