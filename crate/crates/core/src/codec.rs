//! Neural audio codec: ConvNeXt encoder, grouped finite scalar quantizer
//! and a HiFi-GAN style decoder with parallel multi-kernel blocks.
//!
//! Signal path for a waveform `x: [B, 1, N]`:
//!
//! ```text
//! x -> log-mel [B, n_mel, L] -> encoder z [B, d, L] -> f_down z_down [B, C_down, L/f]
//!   -> proj [B, c*G, L/f] -> GFSQ z_hat -> f_up [B, d, L] -> decoder x_hat [B, 1, N]
//! ```
//!
//! `L = N / hop`, so `N` must be a multiple of `hop * factor`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{LogMel, MelConfig, StftConfig};
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, ChannelNorm, Conv1d, ConvTranspose1d, Module};
use crate::tensor::{Conv1dSpec, PadMode, Tensor};
use crate::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_mel: usize,
    /// Channel width of each stage.
    pub dims: Vec<usize>,
    /// ConvNeXt blocks per stage.
    pub depths: Vec<usize>,
    /// Latent width `d`.
    pub latent_dim: usize,
    pub drop_path: f32,
    pub layer_scale_init: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mel: 160,
            dims: vec![64, 64],
            depths: vec![1, 1],
            latent_dim: 64,
            drop_path: 0.0,
            layer_scale_init: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GfsqConfig {
    pub levels: Vec<u32>,
    pub groups: usize,
    /// Temporal downsampling factor of `f_down`.
    pub factor: usize,
    pub c_down: usize,
}

impl Default for GfsqConfig {
    fn default() -> Self {
        Self { levels: vec![8, 5, 5, 5], groups: 1, factor: 2, c_down: 32 }
    }
}

impl GfsqConfig {
    pub fn channels_per_group(&self) -> usize {
        self.levels.len()
    }

    pub fn total_channels(&self) -> usize {
        self.levels.len() * self.groups
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.iter().any(|&l| l < 2) || self.groups == 0 || self.factor == 0 {
            return Err(Error::Config(format!("invalid quantizer config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Channels after `conv_pre` followed by the output channels of each
    /// upsampling stage; one longer than `rates`.
    pub channels: Vec<usize>,
    pub rates: Vec<usize>,
    pub kernels: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { channels: vec![128, 64, 32, 16, 8], rates: vec![8, 8, 4, 2], kernels: vec![3, 7, 11] }
    }
}

impl DecoderConfig {
    pub fn upsampling(&self) -> usize {
        self.rates.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub f_min: f32,
    pub f_max: f32,
    pub log_floor: f32,
    pub encoder: EncoderConfig,
    pub quantizer: GfsqConfig,
    pub decoder: DecoderConfig,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 48_000,
            n_fft: 2048,
            hop_length: 512,
            f_min: 0.0,
            f_max: 24_000.0,
            log_floor: 1e-5,
            encoder: EncoderConfig::default(),
            quantizer: GfsqConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        self.quantizer.validate()?;
        let e = &self.encoder;
        if e.dims.is_empty() || e.dims.len() != e.depths.len() || e.latent_dim == 0 {
            return Err(Error::Config(format!("encoder dims/depths mismatch: {e:?}")));
        }
        let d = &self.decoder;
        if d.channels.len() != d.rates.len() + 1 || d.rates.iter().any(|r| r % 2 != 0) || d.kernels.is_empty() {
            return Err(Error::Config(format!(
                "decoder needs channels = rates + 1 and even rates, got {d:?}"
            )));
        }
        if d.upsampling() != self.hop_length {
            return Err(Error::Config(format!(
                "decoder upsampling {} must equal hop length {}",
                d.upsampling(),
                self.hop_length
            )));
        }
        Ok(())
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig { n_fft: self.n_fft, win_length: self.n_fft, hop_length: self.hop_length, center: false }
    }

    pub fn mel(&self) -> MelConfig {
        MelConfig {
            sample_rate: self.sample_rate,
            n_mel: self.encoder.n_mel,
            f_min: self.f_min,
            f_max: self.f_max,
            log_floor: self.log_floor,
        }
    }

    /// Waveform lengths must be multiples of this.
    pub fn length_multiple(&self) -> usize {
        self.hop_length * self.quantizer.factor
    }
}

/// Depthwise conv, channel LayerNorm, inverted-bottleneck MLP, layer scale
/// and stochastic depth around a residual connection.
#[derive(Debug, Clone)]
pub struct ConvNeXtBlock1d {
    pub dwconv: Conv1d,
    pub norm: ChannelNorm,
    pub pw1: Conv1d,
    pub pw2: Conv1d,
    pub gamma: Tensor,
    pub drop_path: f32,
}

impl ConvNeXtBlock1d {
    pub fn new<R: Rng + ?Sized>(dim: usize, drop_path: f32, layer_scale: f32, rng: &mut R) -> Self {
        Self {
            dwconv: Conv1d::new(dim, dim, 7, Conv1dSpec { padding: 3, groups: dim, ..Default::default() }, rng),
            norm: ChannelNorm::new(dim),
            pw1: Conv1d::new(dim, 4 * dim, 1, Conv1dSpec::default(), rng),
            pw2: Conv1d::new(4 * dim, dim, 1, Conv1dSpec::default(), rng),
            gamma: Tensor::full(&[dim, 1], layer_scale).into_param(),
            drop_path,
        }
    }

    pub fn forward(&self, x: &Tensor, train_rng: Option<&mut SeededRng>) -> Result<Tensor> {
        let h = self.dwconv.forward(x)?;
        let h = self.norm.forward(&h)?;
        let h = self.pw2.forward(&self.pw1.forward(&h)?.gelu()?)?;
        let h = h.mul(&self.gamma)?;
        let h = match train_rng {
            Some(rng) => h.drop_path(self.drop_path, true, rng)?,
            None => h,
        };
        x.add(&h)
    }
}

impl Module for ConvNeXtBlock1d {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.dwconv.visit_params(&join(prefix, "dwconv"), out);
        self.norm.visit_params(&join(prefix, "norm"), out);
        self.pw1.visit_params(&join(prefix, "pwconv1"), out);
        self.pw2.visit_params(&join(prefix, "pwconv2"), out);
        out.push((join(prefix, "gamma"), self.gamma.clone()));
    }
}

/// ConvNeXt encoder `E: [B, n_mel, L] -> [B, d, L]`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub n_mel: usize,
    pub stem: Conv1d,
    pub stem_norm: ChannelNorm,
    /// `(norm, 1x1 conv)` between consecutive stages.
    pub transitions: Vec<(ChannelNorm, Conv1d)>,
    pub stages: Vec<Vec<ConvNeXtBlock1d>>,
    pub final_norm: ChannelNorm,
    pub proj: Conv1d,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let stem = Conv1d::same(cfg.n_mel, cfg.dims[0], 7, rng);
        let transitions = cfg
            .dims
            .windows(2)
            .map(|w| (ChannelNorm::new(w[0]), Conv1d::new(w[0], w[1], 1, Conv1dSpec::default(), rng)))
            .collect();
        let total: usize = cfg.depths.iter().sum();
        let mut k = 0;
        let stages = cfg
            .dims
            .iter()
            .zip(&cfg.depths)
            .map(|(&dim, &depth)| {
                (0..depth)
                    .map(|_| {
                        let p = if total > 1 { cfg.drop_path * k as f32 / (total - 1) as f32 } else { 0.0 };
                        k += 1;
                        ConvNeXtBlock1d::new(dim, p, cfg.layer_scale_init, rng)
                    })
                    .collect()
            })
            .collect();
        let last = *cfg.dims.last().unwrap();
        Self {
            n_mel: cfg.n_mel,
            stem,
            stem_norm: ChannelNorm::new(cfg.dims[0]),
            transitions,
            stages,
            final_norm: ChannelNorm::new(last),
            proj: Conv1d::new(last, cfg.latent_dim, 1, Conv1dSpec::default(), rng),
        }
    }

    pub fn forward(&self, mel: &Tensor, mut train_rng: Option<&mut SeededRng>) -> Result<Tensor> {
        if mel.rank() != 3 || mel.dim(1) != self.n_mel {
            return shape_err("encode", format!("expected [B, {}, L], got {:?}", self.n_mel, mel.shape()));
        }
        let mut h = self.stem_norm.forward(&self.stem.forward(mel)?)?;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                let (norm, conv) = &self.transitions[i - 1];
                h = conv.forward(&norm.forward(&h)?)?;
            }
            for block in stage {
                h = block.forward(&h, train_rng.as_deref_mut())?;
            }
        }
        self.proj.forward(&self.final_norm.forward(&h)?)
    }
}

impl Module for Encoder {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.stem.visit_params(&join(prefix, "stem"), out);
        self.stem_norm.visit_params(&join(prefix, "stem_norm"), out);
        for (i, (n, c)) in self.transitions.iter().enumerate() {
            n.visit_params(&join(prefix, &format!("transition{i}.norm")), out);
            c.visit_params(&join(prefix, &format!("transition{i}.conv")), out);
        }
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, b) in stage.iter().enumerate() {
                b.visit_params(&join(prefix, &format!("stage{i}.block{j}")), out);
            }
        }
        self.final_norm.visit_params(&join(prefix, "final_norm"), out);
        self.proj.visit_params(&join(prefix, "proj"), out);
    }
}

/// Lookup table for one quantizer group: every combination of per-channel
/// values, indexed in mixed radix with the first channel varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub levels: Vec<u32>,
    /// `size() * levels.len()` values, one row per index.
    pub table: Vec<f32>,
}

/// Half-range `floor(L / 2)` of a level.
pub fn half_level(l: u32) -> u32 {
    l / 2
}

impl Codebook {
    pub fn new(levels: &[u32]) -> Self {
        let radices: Vec<usize> = levels.iter().map(|&l| 2 * half_level(l) as usize + 1).collect();
        let size: usize = radices.iter().product();
        let mut table = Vec::with_capacity(size * levels.len());
        for k in 0..size {
            let mut rem = k;
            for (i, &r) in radices.iter().enumerate() {
                table.push((rem % r) as f32 - half_level(levels[i]) as f32);
                rem /= r;
            }
        }
        Self { levels: levels.to_vec(), table }
    }

    pub fn size(&self) -> usize {
        self.table.len() / self.levels.len()
    }

    pub fn lookup(&self, k: u32) -> Result<&[f32]> {
        let c = self.levels.len();
        let k = k as usize;
        if k >= self.size() {
            return Err(Error::InvalidArgument(format!(
                "codebook index {k} out of range (size {})",
                self.size()
            )));
        }
        Ok(&self.table[k * c..(k + 1) * c])
    }

    /// Index of a vector of quantized values.
    pub fn index_of(&self, values: &[f32]) -> u32 {
        let mut k = 0usize;
        let mut mul = 1usize;
        for (&v, &l) in values.iter().zip(&self.levels) {
            let h = half_level(l);
            k += (v as i64 + h as i64) as usize * mul;
            mul *= 2 * h as usize + 1;
        }
        k as u32
    }
}

/// Output of the quantizer.
#[derive(Debug, Clone)]
pub struct QuantizedLatent {
    /// Quantized values `[B, c*G, L_down]`, differentiable via the STE.
    pub values: Tensor,
    /// Codebook indices laid out as `[B, G, L_down]`.
    pub indices: Vec<u32>,
    pub batch: usize,
    pub groups: usize,
    pub len: usize,
}

/// Grouped finite scalar quantizer `Q(z) = round(floor(L/2) * tanh(z))`.
#[derive(Debug, Clone)]
pub struct Gfsq {
    pub levels: Vec<u32>,
    pub groups: usize,
    pub codebooks: Vec<Codebook>,
}

impl Gfsq {
    pub fn new(cfg: &GfsqConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            levels: cfg.levels.clone(),
            groups: cfg.groups,
            codebooks: (0..cfg.groups).map(|_| Codebook::new(&cfg.levels)).collect(),
        })
    }

    fn channels(&self) -> usize {
        self.levels.len() * self.groups
    }

    /// Scalar form of the quantizer.
    pub fn quantize_scalar(z: f32, level: u32) -> f32 {
        (half_level(level) as f32 * z.tanh()).round_ties_even()
    }

    pub fn quantize(&self, z: &Tensor) -> Result<QuantizedLatent> {
        let c_total = self.channels();
        if z.rank() != 3 || z.dim(1) != c_total {
            return shape_err("gfsq_quantize", format!("expected [B, {c_total}, L], got {:?}", z.shape()));
        }
        let (b, len) = (z.dim(0), z.dim(2));
        let scale: Vec<f32> = (0..self.groups)
            .flat_map(|_| self.levels.iter().map(|&l| half_level(l) as f32))
            .collect();
        let scale = Tensor::new(scale, &[c_total, 1])?;
        let values = z.tanh()?.mul(&scale)?.round_ste()?;
        let indices = self.indices_of(&values)?;
        Ok(QuantizedLatent { values, indices, batch: b, groups: self.groups, len })
    }

    fn indices_of(&self, values: &Tensor) -> Result<Vec<u32>> {
        let (b, len) = (values.dim(0), values.dim(2));
        let c = self.levels.len();
        let v = values.data();
        let mut out = Vec::with_capacity(b * self.groups * len);
        let mut buf = vec![0.0f32; c];
        for bi in 0..b {
            for g in 0..self.groups {
                for t in 0..len {
                    for (i, slot) in buf.iter_mut().enumerate() {
                        *slot = v[(bi * self.groups * c + g * c + i) * len + t];
                    }
                    out.push(self.codebooks[g].index_of(&buf));
                }
            }
        }
        Ok(out)
    }

    /// Rebuilds `[B, c*G, L]` quantized values from indices.
    pub fn decode_indices(&self, indices: &[u32], batch: usize, len: usize) -> Result<Tensor> {
        let c = self.levels.len();
        if indices.len() != batch * self.groups * len {
            return shape_err(
                "codebook_roundtrip",
                format!("{} indices for batch {batch}, {} groups, length {len}", indices.len(), self.groups),
            );
        }
        let mut out = vec![0.0f32; batch * self.groups * c * len];
        for bi in 0..batch {
            for g in 0..self.groups {
                for t in 0..len {
                    let row = self.codebooks[g].lookup(indices[(bi * self.groups + g) * len + t])?;
                    for (i, &v) in row.iter().enumerate() {
                        out[(bi * self.groups * c + g * c + i) * len + t] = v;
                    }
                }
            }
        }
        Tensor::new(out, &[batch, self.groups * c, len])
    }
}

/// `x + SiLU(sum_k conv_k(x))` over parallel branches with different kernels.
#[derive(Debug, Clone)]
pub struct ParallelBlock {
    pub branches: Vec<Conv1d>,
}

impl ParallelBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, kernels: &[usize], rng: &mut R) -> Self {
        Self { branches: kernels.iter().map(|&k| Conv1d::same(channels, channels, k, rng)).collect() }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut acc = self.branches[0].forward(x)?;
        for b in &self.branches[1..] {
            acc = acc.add(&b.forward(x)?)?;
        }
        x.add(&acc.silu()?)
    }
}

impl Module for ParallelBlock {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("branch{i}")), out);
        }
    }
}

/// Decoder `D: [B, d, L] -> [B, 1, L * prod(rates)]`.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub latent_dim: usize,
    pub conv_pre: Conv1d,
    pub ups: Vec<ConvTranspose1d>,
    pub blocks: Vec<ParallelBlock>,
    pub conv_post: Conv1d,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(cfg: &DecoderConfig, latent_dim: usize, rng: &mut R) -> Self {
        let ch = &cfg.channels;
        let ups = cfg
            .rates
            .iter()
            .enumerate()
            .map(|(i, &r)| ConvTranspose1d::new(ch[i], ch[i + 1], 2 * r, r, r / 2, rng))
            .collect();
        let blocks = ch[1..].iter().map(|&c| ParallelBlock::new(c, &cfg.kernels, rng)).collect();
        Self {
            latent_dim,
            conv_pre: Conv1d::same(latent_dim, ch[0], 7, rng),
            ups,
            blocks,
            conv_post: Conv1d::same(*ch.last().unwrap(), 1, 7, rng),
        }
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() != 3 || z.dim(1) != self.latent_dim {
            return shape_err("decode", format!("expected [B, {}, L], got {:?}", self.latent_dim, z.shape()));
        }
        let mut h = self.conv_pre.forward(z)?;
        for (up, block) in self.ups.iter().zip(&self.blocks) {
            h = block.forward(&up.forward(&h.silu()?)?)?;
        }
        self.conv_post.forward(&h.silu()?)?.tanh()
    }
}

impl Module for Decoder {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv_pre.visit_params(&join(prefix, "conv_pre"), out);
        for (i, (u, b)) in self.ups.iter().zip(&self.blocks).enumerate() {
            u.visit_params(&join(prefix, &format!("up{i}")), out);
            b.visit_params(&join(prefix, &format!("block{i}")), out);
        }
        self.conv_post.visit_params(&join(prefix, "conv_post"), out);
    }
}

/// Everything produced by one codec pass.
#[derive(Debug, Clone)]
pub struct CodecOutput {
    pub x_hat: Tensor,
    pub z: Tensor,
    pub z_down: Tensor,
    pub z_hat: Tensor,
    pub indices: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub frontend: LogMel,
    pub encoder: Encoder,
    pub down: Conv1d,
    pub proj_in: Conv1d,
    pub quantizer: Gfsq,
    pub proj_out: Conv1d,
    pub up: ConvTranspose1d,
    pub decoder: Decoder,
}

impl Codec {
    pub fn new<R: Rng + ?Sized>(cfg: &CodecConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let q = &cfg.quantizer;
        let d = cfg.encoder.latent_dim;
        Ok(Self {
            cfg: cfg.clone(),
            frontend: LogMel::new(cfg.stft(), cfg.mel())?,
            encoder: Encoder::new(&cfg.encoder, rng),
            down: Conv1d::new(d, q.c_down, q.factor, Conv1dSpec { stride: q.factor, ..Default::default() }, rng),
            proj_in: Conv1d::new(q.c_down, q.total_channels(), 1, Conv1dSpec::default(), rng),
            quantizer: Gfsq::new(q)?,
            proj_out: Conv1d::new(q.total_channels(), q.c_down, 1, Conv1dSpec::default(), rng),
            up: ConvTranspose1d::new(q.c_down, d, q.factor, q.factor, 0, rng),
            decoder: Decoder::new(&cfg.decoder, d, rng),
        })
    }

    /// Checks that a waveform `[B, 1, N]` has a usable length.
    pub fn check_waveform(&self, x: &Tensor) -> Result<()> {
        let m = self.cfg.length_multiple();
        match x.shape() {
            [_, 1, n] if n % m == 0 && *n >= self.cfg.n_fft => Ok(()),
            [_, 1, n] => Err(Error::InvalidArgument(format!(
                "waveform length {n} must be a multiple of {m} (hop {} x downsampling {}) and at least {}; \
                 pad the input first (see pipeline::pad_to_multiple)",
                self.cfg.hop_length, self.cfg.quantizer.factor, self.cfg.n_fft
            ))),
            s => shape_err("codec", format!("waveform must be [B, 1, N], got {s:?}")),
        }
    }

    /// Log-mel features with exactly `N / hop` frames.
    pub fn mel(&self, x: &Tensor) -> Result<Tensor> {
        let p = (self.cfg.n_fft - self.cfg.hop_length) / 2;
        let xp = x.pad_last(p, p, PadMode::Reflect)?;
        self.frontend.forward(&xp)
    }

    pub fn encode(&self, mel: &Tensor, train_rng: Option<&mut SeededRng>) -> Result<Tensor> {
        self.encoder.forward(mel, train_rng)
    }

    pub fn f_down(&self, z: &Tensor) -> Result<Tensor> {
        if z.rank() == 3 && !z.dim(2).is_multiple_of(self.cfg.quantizer.factor) {
            return shape_err(
                "f_down",
                format!("length {} not divisible by factor {}", z.dim(2), self.cfg.quantizer.factor),
            );
        }
        self.down.forward(z)
    }

    pub fn quantize(&self, z_down: &Tensor) -> Result<QuantizedLatent> {
        self.quantizer.quantize(&self.proj_in.forward(z_down)?)
    }

    pub fn f_up(&self, z_hat: &Tensor) -> Result<Tensor> {
        self.up.forward(&self.proj_out.forward(z_hat)?)
    }

    pub fn decode(&self, z_q: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z_q)
    }

    /// Waveform to continuous downsampled latent.
    pub fn latent(&self, x: &Tensor) -> Result<Tensor> {
        self.check_waveform(x)?;
        self.f_down(&self.encode(&self.mel(x)?, None)?)
    }

    /// Continuous downsampled latent to waveform.
    pub fn synthesize(&self, z_down: &Tensor) -> Result<Tensor> {
        let q = self.quantize(z_down)?;
        self.decode(&self.f_up(&q.values)?)
    }

    pub fn forward(&self, x: &Tensor, train_rng: Option<&mut SeededRng>) -> Result<CodecOutput> {
        self.check_waveform(x)?;
        let z = self.encode(&self.mel(x)?, train_rng)?;
        let z_down = self.f_down(&z)?;
        let q = self.quantize(&z_down)?;
        let x_hat = self.decode(&self.f_up(&q.values)?)?;
        Ok(CodecOutput { x_hat, z, z_down, z_hat: q.values, indices: q.indices })
    }
}

impl Module for Codec {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.encoder.visit_params(&join(prefix, "encoder"), out);
        self.down.visit_params(&join(prefix, "f_down"), out);
        self.proj_in.visit_params(&join(prefix, "quant_proj_in"), out);
        self.proj_out.visit_params(&join(prefix, "quant_proj_out"), out);
        self.up.visit_params(&join(prefix, "f_up"), out);
        self.decoder.visit_params(&join(prefix, "decoder"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantizer_examples() {
        assert_eq!(Gfsq::quantize_scalar(0.0, 8), 0.0);
        assert_eq!(Gfsq::quantize_scalar(0.5, 5), 1.0);
        assert_eq!(Gfsq::quantize_scalar(10.0, 8), 4.0);
        assert_eq!(Gfsq::quantize_scalar(-10.0, 5), -2.0);
    }

    #[test]
    fn codebook_sizes() {
        let cb = Codebook::new(&[8, 5, 5, 5]);
        assert_eq!(cb.size(), 9 * 5 * 5 * 5);
        assert_eq!(cb.lookup(0).unwrap(), &[-4.0, -2.0, -2.0, -2.0]);
        assert!(cb.lookup(cb.size() as u32).is_err());
        for k in [0u32, 7, 100, 1124] {
            assert_eq!(cb.index_of(cb.lookup(k).unwrap()), k);
        }
    }

    #[test]
    fn grouped_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Gfsq::new(&GfsqConfig { groups: 3, ..Default::default() }).unwrap();
        let z = Tensor::randn(&[2, 12, 5], &mut rng).scale(2.0).unwrap();
        let out = q.quantize(&z).unwrap();
        assert_eq!(out.indices.len(), 2 * 3 * 5);
        let back = q.decode_indices(&out.indices, 2, 5).unwrap();
        assert_eq!(back.to_vec(), out.values.to_vec());
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = CodecConfig { hop_length: 256, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = CodecConfig {
            quantizer: GfsqConfig { levels: vec![1, 5], ..Default::default() },
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
