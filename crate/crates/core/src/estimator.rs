//! Rotary U-Net noise estimator.
//!
//! The latent `[B, d, L]` is treated as a one-channel image of height `d`
//! and width `L`. Each of the down/up stages runs a residual block, a
//! FiLM-conditioned ConvNeXt block and rotary linear attention; the
//! condition `z'_0` enters only through FiLM.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseEstimator;
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, ChannelNorm, Conv2d, ConvTranspose2d, GroupNorm, Linear, Module};
use crate::tensor::{Conv2dSpec, Tensor};
use crate::SeededRng;

/// Interleaved `[sin(t w_0), cos(t w_0), sin(t w_1), ...]` with
/// `w_i = base^(-2i / width)`.
pub fn sinusoidal_embed(t: f32, width: usize, base: f32) -> Result<Vec<f32>> {
    if width == 0 || !width.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("embedding width must be even and positive, got {width}")));
    }
    let mut out = Vec::with_capacity(width);
    for i in 0..width / 2 {
        let w = (base as f64).powf(-(2.0 * i as f64) / width as f64);
        let a = t as f64 * w;
        out.push(a.sin() as f32);
        out.push(a.cos() as f32);
    }
    Ok(out)
}

/// `(1 + gamma) * u + beta`.
pub fn film(u: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    u.mul(&gamma.add_scalar(1.0)?)?.add(beta)
}

/// Rotates channel pairs `(2i, 2i+1)` of `x: [..., n, channels]` by
/// `(n + offset) * base^(-2i / channels)`.
pub fn rope_rotate(x: &Tensor, offset: usize, base: f32) -> Result<Tensor> {
    if x.rank() < 2 {
        return shape_err("rope_rotate", format!("need [..., n, channels], got {:?}", x.shape()));
    }
    let c = x.dim(x.rank() - 1);
    let n = x.dim(x.rank() - 2);
    if !c.is_multiple_of(2) {
        return shape_err("rope_rotate", format!("channel count {c} must be even"));
    }
    let half = c / 2;
    let mut cos = vec![0.0f32; n * half];
    let mut sin = vec![0.0f32; n * half];
    for p in 0..n {
        for i in 0..half {
            let theta = (base as f64).powf(-(2.0 * i as f64) / c as f64);
            let a = (p + offset) as f64 * theta;
            cos[p * half + i] = a.cos() as f32;
            sin[p * half + i] = a.sin() as f32;
        }
    }
    let rotate = move |src: &[f32], sign: f32| -> Vec<f32> {
        let mut out = vec![0.0f32; src.len()];
        for (row, (s, o)) in src.chunks_exact(c).zip(out.chunks_exact_mut(c)).enumerate() {
            let p = row % n;
            for i in 0..half {
                let (cs, sn) = (cos[p * half + i], sign * sin[p * half + i]);
                let (a, b) = (s[2 * i], s[2 * i + 1]);
                o[2 * i] = a * cs - b * sn;
                o[2 * i + 1] = a * sn + b * cs;
            }
        }
        out
    };
    let data = rotate(&x.data(), 1.0);
    let rotate = std::rc::Rc::new(rotate);
    Tensor::from_op("rope_rotate", x.shape().to_vec(), data, vec![x.clone()], move |g, _| {
        vec![Some(rotate(g, -1.0))]
    })
}

/// Kernelized attention over `[S, n, dh]` queries/keys and `[S, n, dv]`
/// values: `phi(Q)(phi(K)^T V) / phi(Q)(phi(K)^T 1)` with
/// `phi = elu + 1`. With `rope`, queries and keys are rotated first.
pub fn linear_attention(q: &Tensor, k: &Tensor, v: &Tensor, rope: Option<f32>) -> Result<Tensor> {
    if q.rank() != 3 || q.shape() != k.shape() || v.rank() != 3 || v.dim(0) != q.dim(0) || v.dim(1) != q.dim(1) {
        return shape_err(
            "linear_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        );
    }
    let (q, k) = match rope {
        Some(base) => (rope_rotate(q, 0, base)?, rope_rotate(k, 0, base)?),
        None => (q.clone(), k.clone()),
    };
    let qf = q.elu_plus_one()?;
    let kf = k.elu_plus_one()?;
    let kv = kf.transpose(1, 2)?.matmul(v)?;
    let num = qf.matmul(&kv)?;
    let ksum = kf.sum_axis(1, true)?;
    let den = qf.mul(&ksum)?.sum_axis(2, true)?;
    num.div(&den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub c_base: usize,
    pub stages: usize,
    pub heads: usize,
    pub norm_groups: usize,
    /// Maximum stochastic-depth probability, reached at the last block.
    pub drop_path: f32,
    pub zero_init_output: bool,
    pub rope_base: f32,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { c_base: 64, stages: 4, heads: 4, norm_groups: 8, drop_path: 0.0, zero_init_output: true, rope_base: 10_000.0 }
    }
}

impl UNetConfig {
    pub fn channels(&self, stage: usize) -> usize {
        self.c_base << stage
    }

    pub fn time_dim(&self) -> usize {
        4 * self.c_base
    }

    /// Spatial sizes must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << self.stages
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_base == 0 || !self.c_base.is_multiple_of(2) || self.stages == 0 || self.heads == 0 {
            return Err(Error::Config(format!("invalid U-Net config {self:?}")));
        }
        for s in 0..=self.stages {
            let c = self.channels(s);
            if !c.is_multiple_of(self.heads) || !(c / self.heads).is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "stage {s}: {c} channels must split into {} heads of even width",
                    self.heads
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub time: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, tdim: usize, groups: usize, rng: &mut R) -> Self {
        Self {
            norm1: GroupNorm::new(groups, cin),
            conv1: Conv2d::same(cin, cout, 3, rng),
            time: Linear::new(tdim, cout, rng),
            norm2: GroupNorm::new(groups, cout),
            conv2: Conv2d::same(cout, cout, 3, rng),
            skip: (cin != cout).then(|| Conv2d::same(cin, cout, 1, rng)),
        }
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let tb = self.time.forward(&temb.silu()?)?;
        let (b, c) = (tb.dim(0), tb.dim(1));
        let h = h.add(&tb.reshape(&[b, c, 1, 1])?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        match &self.skip {
            Some(s) => s.forward(x)?.add(&h),
            None => x.add(&h),
        }
    }
}

impl Module for ResBlock {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm1.visit_params(&join(prefix, "norm1"), out);
        self.conv1.visit_params(&join(prefix, "conv1"), out);
        self.time.visit_params(&join(prefix, "time"), out);
        self.norm2.visit_params(&join(prefix, "norm2"), out);
        self.conv2.visit_params(&join(prefix, "conv2"), out);
        if let Some(s) = &self.skip {
            s.visit_params(&join(prefix, "skip"), out);
        }
    }
}

/// ConvNeXt block with FiLM conditioning on the timestep embedding and
/// the interpolated condition latent.
#[derive(Debug, Clone)]
pub struct TConvNeXtBlock {
    pub dwconv: Conv2d,
    pub norm: ChannelNorm,
    pub film: Conv2d,
    pub pw1: Conv2d,
    pub pw2: Conv2d,
    pub drop_path: f32,
}

impl TConvNeXtBlock {
    pub fn new<R: Rng + ?Sized>(c: usize, embed_dim: usize, drop_path: f32, rng: &mut R) -> Self {
        let dw = Conv2dSpec { padding: (3, 3), groups: c, ..Default::default() };
        Self {
            dwconv: Conv2d::new(c, c, (7, 7), dw, rng),
            norm: ChannelNorm::plain(),
            film: Conv2d::same(embed_dim + 1, 2 * c, 1, rng),
            pw1: Conv2d::same(c, 4 * c, 1, rng),
            pw2: Conv2d::same(4 * c, c, 1, rng).zero_init(),
            drop_path,
        }
    }

    /// `delta: [B, embed_dim]`, `cond: [B, d, L]`.
    pub fn forward(&self, x: &Tensor, delta: &Tensor, cond: &Tensor, train_rng: Option<&mut SeededRng>) -> Result<Tensor> {
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let u = self.norm.forward(&self.dwconv.forward(x)?)?;
        let e = delta.dim(1);
        let dmap = delta.reshape(&[b, e, 1, 1])?.broadcast_to(&[b, e, h, w])?;
        let cmap = cond.unsqueeze(1)?.interpolate_nearest(&[h, w])?;
        let gb = self.film.forward(&Tensor::concat(&[&dmap, &cmap], 1)?)?;
        let parts = gb.split(1, &[c, c])?;
        let u = film(&u, &parts[0], &parts[1])?;
        let u = self.pw2.forward(&self.pw1.forward(&u)?.gelu()?)?;
        let u = match train_rng {
            Some(rng) => u.drop_path(self.drop_path, true, rng)?,
            None => u,
        };
        x.add(&u)
    }
}

impl Module for TConvNeXtBlock {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.dwconv.visit_params(&join(prefix, "dwconv"), out);
        self.film.visit_params(&join(prefix, "film"), out);
        self.pw1.visit_params(&join(prefix, "pwconv1"), out);
        self.pw2.visit_params(&join(prefix, "pwconv2"), out);
    }
}

/// Pre-normalized multi-head rotary linear attention with a residual.
/// Every row of the feature map (fixed `d'`) is an independent sequence
/// along the time axis.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub heads: usize,
    pub rope_base: f32,
    pub norm: GroupNorm,
    pub qkv: Conv2d,
    pub out: Conv2d,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(c: usize, heads: usize, groups: usize, rope_base: f32, rng: &mut R) -> Self {
        Self {
            heads,
            rope_base,
            norm: GroupNorm::new(groups, c),
            qkv: Conv2d::same(c, 3 * c, 1, rng),
            out: Conv2d::same(c, c, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let dh = c / self.heads;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?;
        let to_seq = |t: &Tensor| -> Result<Tensor> {
            t.reshape(&[b, self.heads, dh, h, w])?
                .permute(&[0, 1, 3, 4, 2])?
                .reshape(&[b * self.heads * h, w, dh])
        };
        let parts = qkv.split(1, &[c, c, c])?;
        let o = linear_attention(&to_seq(&parts[0])?, &to_seq(&parts[1])?, &to_seq(&parts[2])?, Some(self.rope_base))?;
        let o = o
            .reshape(&[b, self.heads, h, w, dh])?
            .permute(&[0, 1, 4, 2, 3])?
            .reshape(&[b, c, h, w])?;
        x.add(&self.out.forward(&o)?)
    }
}

impl Module for AttentionBlock {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm.visit_params(&join(prefix, "norm"), out);
        self.qkv.visit_params(&join(prefix, "qkv"), out);
        self.out.visit_params(&join(prefix, "out"), out);
    }
}

#[derive(Debug, Clone)]
pub struct DownStage {
    pub res: ResBlock,
    pub tconv: TConvNeXtBlock,
    pub attn: AttentionBlock,
    pub downsample: Conv2d,
}

#[derive(Debug, Clone)]
pub struct UpStage {
    pub upsample: ConvTranspose2d,
    pub res: ResBlock,
    pub tconv: TConvNeXtBlock,
    pub attn: AttentionBlock,
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub in_conv: Conv2d,
    pub time1: Linear,
    pub time2: Linear,
    pub down: Vec<DownStage>,
    pub mid_res1: ResBlock,
    pub mid_attn: AttentionBlock,
    pub mid_res2: ResBlock,
    pub up: Vec<UpStage>,
    pub out_norm: GroupNorm,
    pub out_conv: Conv2d,
}

/// Intermediate shapes of one forward pass, for auditing.
#[derive(Debug, Clone, Default)]
pub struct UNetTrace {
    pub bottleneck: Vec<usize>,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(cfg: &UNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (cb, td, g) = (cfg.c_base, cfg.time_dim(), cfg.norm_groups);
        let n_blocks = 2 * cfg.stages;
        let dp = |i: usize| if n_blocks > 1 { cfg.drop_path * i as f32 / (n_blocks - 1) as f32 } else { 0.0 };
        let down = (0..cfg.stages)
            .map(|s| {
                let c = cfg.channels(s);
                DownStage {
                    res: ResBlock::new(c, c, td, g, rng),
                    tconv: TConvNeXtBlock::new(c, cb, dp(s), rng),
                    attn: AttentionBlock::new(c, cfg.heads, g, cfg.rope_base, rng),
                    downsample: Conv2d::new(c, 2 * c, (2, 2), Conv2dSpec { stride: (2, 2), ..Default::default() }, rng),
                }
            })
            .collect();
        let cm = cfg.channels(cfg.stages);
        let up = (0..cfg.stages)
            .rev()
            .map(|s| {
                let c = cfg.channels(s);
                UpStage {
                    upsample: ConvTranspose2d::new(2 * c, c, (2, 2), (2, 2), rng),
                    res: ResBlock::new(2 * c, c, td, g, rng),
                    tconv: TConvNeXtBlock::new(c, cb, dp(2 * cfg.stages - 1 - s), rng),
                    attn: AttentionBlock::new(c, cfg.heads, g, cfg.rope_base, rng),
                }
            })
            .collect();
        let out_conv = Conv2d::same(cb, 1, 3, rng);
        Ok(Self {
            cfg: cfg.clone(),
            in_conv: Conv2d::same(1, cb, 3, rng),
            time1: Linear::new(cb, td, rng),
            time2: Linear::new(td, td, rng),
            down,
            mid_res1: ResBlock::new(cm, cm, td, g, rng),
            mid_attn: AttentionBlock::new(cm, cfg.heads, g, cfg.rope_base, rng),
            mid_res2: ResBlock::new(cm, cm, td, g, rng),
            up,
            out_norm: GroupNorm::new(g, cb),
            out_conv: if cfg.zero_init_output { out_conv.zero_init() } else { out_conv },
        })
    }

    fn check_input(&self, z: &Tensor, cond: &Tensor, t: &[usize]) -> Result<()> {
        let m = self.cfg.multiple();
        let [b, d, l] = z.shape() else {
            return shape_err("unet", format!("expected [B, d, L], got {:?}", z.shape()));
        };
        if d % m != 0 || l % m != 0 {
            return shape_err(
                "unet",
                format!(
                    "d={d} and L={l} must be multiples of {m}; pad to d={}, L={}",
                    d.div_ceil(m) * m,
                    l.div_ceil(m) * m
                ),
            );
        }
        if cond.shape() != z.shape() || t.len() != *b {
            return shape_err(
                "unet",
                format!("condition {:?} / {} timesteps for input {:?}", cond.shape(), t.len(), z.shape()),
            );
        }
        Ok(())
    }

    /// Sinusoidal timestep features `[B, c_base]`.
    pub fn delta(&self, t: &[usize]) -> Result<Tensor> {
        let mut v = Vec::with_capacity(t.len() * self.cfg.c_base);
        for &ti in t {
            v.extend(sinusoidal_embed(ti as f32, self.cfg.c_base, 10_000.0)?);
        }
        Tensor::new(v, &[t.len(), self.cfg.c_base])
    }

    /// Full forward pass. `ablate_skip` zeroes the skip connection of one
    /// stage; `train_rng` enables stochastic depth.
    pub fn forward_full(
        &self,
        z: &Tensor,
        cond: &Tensor,
        t: &[usize],
        mut train_rng: Option<&mut SeededRng>,
        ablate_skip: Option<usize>,
        trace: Option<&mut UNetTrace>,
    ) -> Result<Tensor> {
        self.check_input(z, cond, t)?;
        let delta = self.delta(t)?;
        let temb = self.time2.forward(&self.time1.forward(&delta)?.silu()?)?;
        let mut h = self.in_conv.forward(&z.unsqueeze(1)?)?;
        let mut skips = Vec::with_capacity(self.cfg.stages);
        for st in &self.down {
            h = st.res.forward(&h, &temb)?;
            h = st.tconv.forward(&h, &delta, cond, train_rng.as_deref_mut())?;
            h = st.attn.forward(&h)?;
            skips.push(h.clone());
            h = st.downsample.forward(&h)?;
        }
        h = self.mid_res1.forward(&h, &temb)?;
        h = self.mid_attn.forward(&h)?;
        h = self.mid_res2.forward(&h, &temb)?;
        if let Some(tr) = trace {
            tr.bottleneck = h.shape().to_vec();
        }
        for (i, st) in self.up.iter().enumerate() {
            let stage = self.cfg.stages - 1 - i;
            let skip = skips.pop().expect("one skip per stage");
            let skip = if ablate_skip == Some(stage) { Tensor::zeros(skip.shape()) } else { skip };
            h = st.upsample.forward(&h)?;
            h = Tensor::concat(&[&h, &skip], 1)?;
            h = st.res.forward(&h, &temb)?;
            h = st.tconv.forward(&h, &delta, cond, train_rng.as_deref_mut())?;
            h = st.attn.forward(&h)?;
        }
        let out = self.out_conv.forward(&self.out_norm.forward(&h)?.silu()?)?;
        out.squeeze(1)
    }

    pub fn forward(&self, z: &Tensor, cond: &Tensor, t: &[usize], train_rng: Option<&mut SeededRng>) -> Result<Tensor> {
        self.forward_full(z, cond, t, train_rng, None, None)
    }
}

impl NoiseEstimator for UNet {
    fn predict(&self, z_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.forward(z_t, cond, t, None)
    }
}

impl Module for UNet {
    fn visit_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.in_conv.visit_params(&join(prefix, "in_conv"), out);
        self.time1.visit_params(&join(prefix, "time_mlp.0"), out);
        self.time2.visit_params(&join(prefix, "time_mlp.1"), out);
        for (i, st) in self.down.iter().enumerate() {
            let p = join(prefix, &format!("down{i}"));
            st.res.visit_params(&join(&p, "res"), out);
            st.tconv.visit_params(&join(&p, "tconv"), out);
            st.attn.visit_params(&join(&p, "attn"), out);
            st.downsample.visit_params(&join(&p, "downsample"), out);
        }
        let p = join(prefix, "mid");
        self.mid_res1.visit_params(&join(&p, "res1"), out);
        self.mid_attn.visit_params(&join(&p, "attn"), out);
        self.mid_res2.visit_params(&join(&p, "res2"), out);
        for (i, st) in self.up.iter().enumerate() {
            let p = join(prefix, &format!("up{}", self.cfg.stages - 1 - i));
            st.upsample.visit_params(&join(&p, "upsample"), out);
            st.res.visit_params(&join(&p, "res"), out);
            st.tconv.visit_params(&join(&p, "tconv"), out);
            st.attn.visit_params(&join(&p, "attn"), out);
        }
        self.out_norm.visit_params(&join(prefix, "out_norm"), out);
        self.out_conv.visit_params(&join(prefix, "out_conv"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn embed_at_zero() {
        let e = sinusoidal_embed(0.0, 8, 10_000.0).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(sinusoidal_embed(1.0, 7, 10_000.0).is_err());
    }

    #[test]
    fn film_special_cases() {
        let u = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::new(vec![0.5, -0.5], &[2]).unwrap();
        assert_eq!(film(&u, &Tensor::zeros(&[2]), &Tensor::zeros(&[2])).unwrap().to_vec(), u.to_vec());
        assert_eq!(film(&u, &Tensor::full(&[2], -1.0), &b).unwrap().to_vec(), b.to_vec());
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        assert_eq!(rope_rotate(&x, 0, 10_000.0).unwrap().to_vec(), x.to_vec());
        assert!(rope_rotate(&Tensor::zeros(&[2, 3]), 0, 10_000.0).is_err());
    }

    #[test]
    fn single_position_attention_returns_value() {
        let mut rng = SeededRng::seed_from_u64(4);
        let q = Tensor::randn(&[2, 1, 4], &mut rng);
        let k = Tensor::randn(&[2, 1, 4], &mut rng);
        let v = Tensor::randn(&[2, 1, 3], &mut rng);
        let o = linear_attention(&q, &k, &v, Some(10_000.0)).unwrap();
        for (a, b) in o.data().iter().zip(v.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unet_shape_contract() {
        let mut rng = SeededRng::seed_from_u64(5);
        let cfg = UNetConfig { c_base: 8, ..Default::default() };
        let net = UNet::new(&cfg, &mut rng).unwrap();
        let z = Tensor::randn(&[2, 16, 32], &mut rng);
        let mut tr = UNetTrace::default();
        let y = net.forward_full(&z, &z, &[3, 7], None, None, Some(&mut tr)).unwrap();
        assert_eq!(y.shape(), z.shape());
        assert_eq!(tr.bottleneck, vec![2, 128, 1, 2]);
        let bad = Tensor::zeros(&[1, 16, 20]);
        let err = net.forward(&bad, &bad, &[1], None).unwrap_err().to_string();
        assert!(err.contains("L=32"), "{err}");
    }
}
