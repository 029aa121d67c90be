//! Finite differences against reverse-mode gradients.
//!
//! Each case maps some leaf tensors to an output `y`; the scalar probed is
//! `L = sum(w * y)` for fixed Gaussian weights `w`, accumulated in f64.
//! Derivatives use the fourth-order central stencil (Richardson
//! extrapolation of steps `h` and `2h`) on up to [`SAMPLES`] coordinates
//! per input. The error of a case is `||g_fd - g_ad|| / max(||g_fd||, ||g_ad||)`
//! over all sampled coordinates; the same ratio is also kept per input.
//!
//! Piecewise-linear cases use inputs whose kinks sit further from the
//! evaluation point than the stencil reaches.

use lldm_core::codec::{ConvNeXtBlock1d, Decoder, DecoderConfig, Encoder, EncoderConfig, ParallelBlock};
use lldm_core::dsp::{complex_abs, log_mel_spectrogram, magnitude, stft, LogMel, MelConfig, StftConfig};
use lldm_core::estimator::{film, linear_attention, rope_rotate, AttentionBlock, ResBlock, TConvNeXtBlock, UNet, UNetConfig};
use lldm_core::losses::{
    feature_matching_loss, lsgan_disc_loss, lsgan_gen_loss, spectral_loss, MultiScaleMel, PeriodDiscriminator, Reduction,
};
use lldm_core::{no_grad, Conv1dSpec, Conv2dSpec, Module, PadMode, Result, Tensor};
use rand::seq::index::sample;

use super::{leaf, leaf_away_from_zero, randomize_params, rng};

pub const TOL: f64 = 1e-3;
/// Bound on the error of any single input of a case.
pub const INPUT_TOL: f64 = 1e-2;
pub const SAMPLES: usize = 40;
/// Default step relative to `max(1, |x|)`.
pub const STEP: f64 = 2e-2;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: Box<dyn Fn() -> Result<Tensor>>,
    pub step: f64,
}

impl Case {
    pub fn new(name: &str, inputs: Vec<Tensor>, f: impl Fn() -> Result<Tensor> + 'static) -> Self {
        Self { name: name.to_string(), inputs, f: Box::new(f), step: STEP }
    }

    pub fn with_module(name: &str, mut inputs: Vec<Tensor>, m: &dyn Module, f: impl Fn() -> Result<Tensor> + 'static) -> Self {
        inputs.extend(m.params());
        Self::new(name, inputs, f)
    }

    pub fn step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub error: f64,
    pub per_input: Vec<f64>,
    pub any_grad: bool,
}

impl CheckResult {
    pub fn passes(&self) -> bool {
        self.error < TOL && self.any_grad && self.per_input.iter().all(|e| *e < INPUT_TOL)
    }

    pub fn worst_input(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

pub fn check(case: &Case) -> CheckResult {
    check_with_step(case, case.step)
}

pub fn check_with_step(case: &Case, step: f64) -> CheckResult {
    for t in &case.inputs {
        t.zero_grad();
    }
    let out = (case.f)().expect("forward");
    let w = Tensor::randn(out.shape(), &mut rng(0xfd));
    out.mul(&w).unwrap().sum_all().unwrap().backward().expect("backward");
    let wv: Vec<f64> = w.to_vec().into_iter().map(f64::from).collect();
    let eval = || -> f64 {
        let o = no_grad(|| (case.f)()).expect("forward");
        let d = o.data();
        d.iter().zip(&wv).map(|(&a, b)| a as f64 * b).sum()
    };
    let (mut t_diff, mut t_ad, mut t_fd) = (0.0f64, 0.0f64, 0.0f64);
    let mut any_grad = false;
    let mut per_input = Vec::new();
    for (k, x) in case.inputs.iter().enumerate() {
        let g = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
        any_grad |= g.iter().any(|&v| v != 0.0);
        let n = x.numel();
        let idx: Vec<usize> = if n <= SAMPLES { (0..n).collect() } else { sample(&mut rng(k as u64), n, SAMPLES).into_vec() };
        let base = x.to_vec();
        let (mut diff, mut a2, mut f2) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &idx {
            let h = step * f64::max(1.0, base[i].abs() as f64);
            let at = |delta: f64| -> (f64, f64) {
                let mut v = base.clone();
                v[i] = (base[i] as f64 + delta) as f32;
                let moved = v[i] as f64 - base[i] as f64;
                x.set_data(v).unwrap();
                (eval(), moved)
            };
            let ((p1, dp1), (m1, dm1)) = (at(h), at(-h));
            let ((p2, dp2), (m2, dm2)) = (at(2.0 * h), at(-2.0 * h));
            let d1 = (p1 - m1) / (dp1 - dm1);
            let d2 = (p2 - m2) / (dp2 - dm2);
            let fd = (4.0 * d1 - d2) / 3.0;
            let ad = g[i] as f64;
            diff += (fd - ad).powi(2);
            a2 += ad * ad;
            f2 += fd * fd;
        }
        x.set_data(base).unwrap();
        per_input.push(rel(diff, a2, f2));
        t_diff += diff;
        t_ad += a2;
        t_fd += f2;
    }
    CheckResult { error: rel(t_diff, t_ad, t_fd), per_input, any_grad }
}

fn rel(diff: f64, a2: f64, f2: f64) -> f64 {
    let denom = a2.sqrt().max(f2.sqrt());
    if denom > 1e-9 {
        diff.sqrt() / denom
    } else {
        0.0
    }
}

fn unary(name: &str, x: Tensor, f: fn(&Tensor) -> Result<Tensor>) -> Case {
    let xi = x.clone();
    Case::new(name, vec![x], move || f(&xi))
}

fn binary(name: &str, a: Tensor, b: Tensor, f: fn(&Tensor, &Tensor) -> Result<Tensor>) -> Case {
    let (ai, bi) = (a.clone(), b.clone());
    Case::new(name, vec![a, b], move || f(&ai, &bi))
}

/// Elementwise ops, reductions and shape ops.
pub fn op_cases() -> Vec<Case> {
    let mut c = vec![
        binary("add (broadcast)", leaf(&[2, 3, 4], 1), leaf(&[3, 1], 2), |a, b| a.add(b)),
        binary("sub (broadcast)", leaf(&[2, 3, 4], 3), leaf(&[4], 4), |a, b| a.sub(b)),
        binary("mul (broadcast)", leaf(&[2, 3, 4], 5), leaf(&[2, 1, 4], 6), |a, b| a.mul(b)),
        binary("div", leaf(&[3, 4], 7), leaf_away_from_zero(&[3, 4], 8, 0.5), |a, b| a.div(b)),
        unary("neg", leaf(&[5], 9), |x| x.neg()),
        unary("scale", leaf(&[5], 10), |x| x.scale(-2.5)),
        unary("add_scalar", leaf(&[5], 11), |x| x.add_scalar(0.7)),
        unary("exp", leaf(&[2, 5], 12), |x| x.exp()),
        unary("log", leaf_away_from_zero(&[2, 5], 13, 0.3), |x| x.abs()?.log()),
        unary("sqrt", leaf_away_from_zero(&[2, 5], 14, 0.3), |x| x.square()?.sqrt()),
        unary("abs", leaf_away_from_zero(&[2, 5], 15, 0.05), |x| x.abs()),
        unary("square", leaf(&[2, 5], 16), |x| x.square()),
        unary("tanh", leaf(&[2, 5], 17), |x| x.tanh()),
        unary("sigmoid", leaf(&[2, 5], 18), |x| x.sigmoid()),
        unary("gelu", leaf(&[2, 5], 19), |x| x.gelu()),
        unary("silu", leaf(&[2, 5], 20), |x| x.silu()),
        unary("elu_plus_one", leaf_away_from_zero(&[2, 5], 21, 0.05), |x| x.elu_plus_one()),
        unary("leaky_relu", leaf_away_from_zero(&[2, 5], 22, 0.05), |x| x.leaky_relu(0.1)),
        unary("clamp_min", leaf_away_from_zero(&[2, 5], 23, 0.05), |x| x.clamp_min(0.0)),
        unary("sum_all", leaf(&[3, 4], 24), |x| x.sum_all()),
        unary("mean_all", leaf(&[3, 4], 25), |x| x.mean_all()),
        unary("sum_axis", leaf(&[2, 3, 4], 26), |x| x.sum_axis(1, false)),
        unary("mean_axis keepdim", leaf(&[2, 3, 4], 27), |x| x.mean_axis(2, true)),
        unary("reshape", leaf(&[2, 6], 28), |x| x.reshape(&[3, 4])?.square()),
        unary("unsqueeze/squeeze", leaf(&[2, 3], 29), |x| x.unsqueeze(1)?.square()?.squeeze(1)),
        unary("permute", leaf(&[2, 3, 4], 30), |x| x.permute(&[2, 0, 1])?.square()),
        unary("transpose", leaf(&[2, 3, 4], 31), |x| x.transpose(0, 2)?.tanh()),
        unary("narrow", leaf(&[3, 5], 32), |x| x.narrow(1, 1, 3)?.square()),
        unary("split", leaf(&[4, 6], 33), |x| {
            let p = x.split(1, &[2, 4])?;
            p[0].square()?.sum_all()?.add(&p[1].tanh()?.sum_all()?)
        }),
        binary("concat", leaf(&[2, 3], 34), leaf(&[2, 2], 35), |a, b| Tensor::concat(&[a, b], 1)?.square()),
        unary("pad_last zero", leaf(&[2, 5], 36), |x| x.pad_last(2, 3, PadMode::Zero)?.square()),
        unary("pad_last reflect", leaf(&[2, 5], 37), |x| x.pad_last(3, 2, PadMode::Reflect)?.square()),
        unary("broadcast_to", leaf(&[3, 1], 38), |x| x.broadcast_to(&[2, 3, 4])?.square()),
        unary("interpolate_nearest", leaf(&[1, 2, 3, 4], 39), |x| x.interpolate_nearest(&[5, 7])?.square()),
        binary("matmul 2-D", leaf(&[3, 4], 40), leaf(&[4, 5], 41), |a, b| a.matmul(b)),
        binary("matmul batched", leaf(&[2, 3, 4], 42), leaf(&[2, 4, 2], 43), |a, b| a.matmul(b)),
        unary("layer_norm plain", leaf(&[2, 3, 5], 44), |x| x.layer_norm(&[1], None, None, 1e-5)),
    ];
    let (x, g, b) = (leaf(&[2, 3, 4], 45), leaf(&[3, 4], 46), leaf(&[3, 4], 47));
    let (xi, gi, bi) = (x.clone(), g.clone(), b.clone());
    c.push(Case::new("layer_norm affine", vec![x, g, b], move || xi.layer_norm(&[1, 2], Some(&gi), Some(&bi), 1e-5)));
    let (x, g, b) = (leaf(&[2, 4, 3, 2], 48), leaf(&[4], 49), leaf(&[4], 50));
    let (xi, gi, bi) = (x.clone(), g.clone(), b.clone());
    c.push(Case::new("group_norm", vec![x, g, b], move || xi.group_norm(2, Some(&gi), Some(&bi), 1e-5)));
    let x = leaf(&[4, 3], 51);
    let xi = x.clone();
    c.push(Case::new("drop_path (fixed draw)", vec![x], move || xi.drop_path(0.5, true, &mut rng(3))));
    c
}

/// Convolutions in 1-D and 2-D, strided, dilated, grouped and transposed.
pub fn conv_cases() -> Vec<Case> {
    let mut c = Vec::new();
    let specs1 = [
        ("conv1d", 4, Conv1dSpec { stride: 1, padding: 1, dilation: 1, groups: 1 }),
        ("conv1d strided dilated", 4, Conv1dSpec { stride: 2, padding: 2, dilation: 2, groups: 1 }),
        ("conv1d grouped", 4, Conv1dSpec { stride: 1, padding: 1, dilation: 1, groups: 2 }),
    ];
    for (i, (name, cin, spec)) in specs1.into_iter().enumerate() {
        let s = 100 + 3 * i as u64;
        let (x, w, b) = (leaf(&[2, cin, 11], s), leaf(&[6, cin / spec.groups, 3], s + 1), leaf(&[6], s + 2));
        let (xi, wi, bi) = (x.clone(), w.clone(), b.clone());
        c.push(Case::new(name, vec![x, w, b], move || xi.conv1d(&wi, Some(&bi), spec)));
    }
    let (x, w, b) = (leaf(&[2, 4, 6], 120), leaf(&[4, 3, 4], 121), leaf(&[3], 122));
    let (xi, wi, bi) = (x.clone(), w.clone(), b.clone());
    c.push(Case::new("conv_transpose1d", vec![x, w, b], move || {
        xi.conv_transpose1d(&wi, Some(&bi), Conv1dSpec { stride: 2, padding: 1, ..Default::default() })
    }));
    let spec2 = Conv2dSpec { stride: (2, 1), padding: (1, 2), dilation: (1, 2), groups: 1 };
    let (x, w, b) = (leaf(&[2, 3, 6, 7], 130), leaf(&[4, 3, 3, 3], 131), leaf(&[4], 132));
    let (xi, wi, bi) = (x.clone(), w.clone(), b.clone());
    c.push(Case::new("conv2d strided dilated", vec![x, w, b], move || xi.conv2d(&wi, Some(&bi), spec2)));
    let (x, w, b) = (leaf(&[2, 4, 5, 6], 133), leaf(&[4, 1, 3, 3], 134), leaf(&[4], 135));
    let (xi, wi, bi) = (x.clone(), w.clone(), b.clone());
    c.push(Case::new("depthwise_conv2d", vec![x, w, b], move || {
        xi.depthwise_conv2d(&wi, Some(&bi), Conv2dSpec { padding: (1, 1), groups: 4, ..Default::default() })
    }));
    let (x, w, b) = (leaf(&[1, 4, 3, 3], 136), leaf(&[4, 2, 2, 2], 137), leaf(&[2], 138));
    let (xi, wi, bi) = (x.clone(), w.clone(), b.clone());
    c.push(Case::new("conv_transpose2d", vec![x, w, b], move || {
        xi.conv_transpose2d(&wi, Some(&bi), Conv2dSpec { stride: (2, 2), ..Default::default() })
    }));
    c
}

/// Spectral front-end and the codec losses.
pub fn dsp_loss_cases() -> Vec<Case> {
    let mut c = Vec::new();
    let cfg = StftConfig::new(32, 32, 8);
    let x = leaf(&[2, 1, 96], 200);
    let xi = x.clone();
    c.push(Case::new("stft", vec![x], move || stft(&xi, &cfg)));
    c.push(unary("complex_abs", leaf_away_from_zero(&[3, 4, 2], 201, 0.2), complex_abs));
    let x = leaf(&[1, 1, 96], 202);
    let xi = x.clone();
    c.push(Case::new("magnitude", vec![x], move || magnitude(&xi, &cfg)));
    let mel = MelConfig { sample_rate: 16_000, n_mel: 8, f_min: 0.0, f_max: 8_000.0, log_floor: 1e-5 };
    let x = leaf(&[1, 1, 128], 203);
    let xi = x.clone();
    c.push(Case::new("log_mel_spectrogram", vec![x], move || log_mel_spectrogram(&xi, &cfg, &mel)).step(2e-3));

    let scales = vec![
        (LogMel::new(StftConfig::new(32, 32, 8), mel).unwrap(), 1.0),
        (LogMel::new(StftConfig::new(64, 64, 16), mel).unwrap(), 1.0),
    ];
    let ms = MultiScaleMel::new(scales).unwrap();
    let (x, y) = (leaf(&[1, 1, 160], 204), leaf(&[1, 1, 160], 205));
    let (xi, yi) = (x.clone(), y.clone());
    c.push(Case::new("mel_loss", vec![y], move || ms.loss(&xi, &yi)));
    let _ = x;
    // |X| > |Y| with a margin of 0.15 in every bin, so no L1 or modulus kink
    // is within reach of the stencil.
    let res = vec![StftConfig::new(32, 32, 8), StftConfig::new(16, 16, 4)];
    let x0 = Tensor::randn(&[1, 1, 96], &mut rng(1344)).to_vec();
    let x: Vec<f32> = x0.iter().enumerate().map(|(i, v)| v + 1.0 + if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let n = Tensor::randn(&[1, 1, 96], &mut rng(1345)).to_vec();
    let y: Vec<f32> = x.iter().zip(&n).map(|(a, b)| 0.5 * (a + 0.1 * b)).collect();
    let (x, y) = (Tensor::new(x, &[1, 1, 96]).unwrap().into_param(), Tensor::new(y, &[1, 1, 96]).unwrap().into_param());
    let (xi, yi) = (x.clone(), y.clone());
    c.push(Case::new("spectral_loss", vec![x, y], move || spectral_loss(&xi, &yi, &res, Reduction::Sum)));
    let (r1, f1, r2, f2) = (leaf(&[2, 3], 208), leaf(&[2, 3], 209), leaf(&[4], 210), leaf(&[4], 211));
    let (r1i, f1i, r2i, f2i) = (r1.clone(), f1.clone(), r2.clone(), f2.clone());
    c.push(Case::new("feature_matching_loss", vec![f1, f2], move || {
        feature_matching_loss(&[r1i.clone(), r2i.clone()], &[f1i.clone(), f2i.clone()], &[1.0, 0.5])
    }));
    let _ = (r1, r2);
    c.push(binary("lsgan_disc_loss", leaf(&[2, 5], 212), leaf(&[2, 5], 213), lsgan_disc_loss));
    c.push(unary("lsgan_gen_loss", leaf(&[2, 5], 214), lsgan_gen_loss));
    let d = PeriodDiscriminator::new(3, &[4, 8], &mut rng(215));
    // Every pre-activation is at least 0.013 from the leaky ReLU kink.
    let x = leaf(&[1, 1, 40], 2204);
    let xi = x.clone();
    let di = d.clone();
    c.push(Case::with_module("period discriminator", vec![x], &d, move || {
        let o = di.forward(&xi)?;
        let mut acc = o.score.sum_all()?;
        for f in &o.features {
            acc = acc.add(&f.mean_all()?)?;
        }
        Ok(acc)
    })
    .step(5e-3));
    c
}

/// Estimator pieces: rotary embedding, linear attention, FiLM.
pub fn attention_cases() -> Vec<Case> {
    let mut c = Vec::new();
    c.push(unary("rope_rotate", leaf(&[2, 5, 6], 300), |x| rope_rotate(x, 3, 10_000.0)));
    let (q, k, v) = (leaf(&[2, 6, 4], 301), leaf(&[2, 6, 4], 302), leaf(&[2, 6, 3], 303));
    let (qi, ki, vi) = (q.clone(), k.clone(), v.clone());
    c.push(Case::new("linear_attention", vec![q.clone(), k.clone(), v.clone()], move || linear_attention(&qi, &ki, &vi, None)));
    let (qi, ki, vi) = (q.clone(), k.clone(), v.clone());
    c.push(Case::new("linear_attention + rope", vec![q, k, v], move || linear_attention(&qi, &ki, &vi, Some(100.0))));
    let (u, g, b) = (leaf(&[2, 3, 4], 304), leaf(&[2, 3, 1], 305), leaf(&[2, 3, 1], 306));
    let (ui, gi, bi) = (u.clone(), g.clone(), b.clone());
    c.push(Case::new("film", vec![u, g, b], move || film(&ui, &gi, &bi)));
    c
}

/// Composite blocks with randomized parameters.
pub fn block_cases() -> Vec<Case> {
    let mut c = Vec::new();

    let blk = ConvNeXtBlock1d::new(4, 0.0, 1.0, &mut rng(400));
    randomize_params(&blk, 401, 0.5);
    let x = leaf(&[2, 4, 9], 402);
    let (xi, bi) = (x.clone(), blk.clone());
    c.push(Case::with_module("ConvNeXt block", vec![x], &blk, move || bi.forward(&xi, None)));

    let ecfg = EncoderConfig { n_mel: 6, dims: vec![4, 8], depths: vec![1, 1], latent_dim: 4, ..EncoderConfig::default() };
    let enc = Encoder::new(&ecfg, &mut rng(403));
    randomize_params(&enc, 404, 0.5);
    let x = leaf(&[1, 6, 7], 405);
    let (xi, ei) = (x.clone(), enc.clone());
    c.push(Case::with_module("encoder", vec![x], &enc, move || ei.forward(&xi, None)));

    let pb = ParallelBlock::new(3, &[3, 5], &mut rng(406));
    let x = leaf(&[2, 3, 8], 407);
    let (xi, pi) = (x.clone(), pb.clone());
    c.push(Case::with_module("parallel block", vec![x], &pb, move || pi.forward(&xi)));

    let dcfg = DecoderConfig { channels: vec![6, 4, 2], rates: vec![2, 2], kernels: vec![3, 5] };
    let dec = Decoder::new(&dcfg, 3, &mut rng(408));
    let z = leaf(&[1, 3, 4], 409);
    let (zi, di) = (z.clone(), dec.clone());
    c.push(Case::with_module("decoder", vec![z], &dec, move || di.forward(&zi)));

    let rb = ResBlock::new(4, 8, 6, 2, &mut rng(410));
    let (x, t) = (leaf(&[2, 4, 3, 4], 411), leaf(&[2, 6], 412));
    let (xi, ti, ri) = (x.clone(), t.clone(), rb.clone());
    c.push(Case::with_module("U-Net res block", vec![x, t], &rb, move || ri.forward(&xi, &ti)));

    let tb = TConvNeXtBlock::new(4, 6, 0.0, &mut rng(413));
    randomize_params(&tb, 414, 0.3);
    let (x, d, cond) = (leaf(&[2, 4, 4, 6], 415), leaf(&[2, 6], 416), leaf(&[2, 4, 6], 417));
    let (xi, di, ci, ti) = (x.clone(), d.clone(), cond.clone(), tb.clone());
    c.push(Case::with_module("T-ConvNeXt block", vec![x, d, cond], &tb, move || ti.forward(&xi, &di, &ci, None)));

    let ab = AttentionBlock::new(8, 2, 2, 10_000.0, &mut rng(418));
    let x = leaf(&[1, 8, 2, 5], 419);
    let (xi, ai) = (x.clone(), ab.clone());
    c.push(Case::with_module("attention block", vec![x], &ab, move || ai.forward(&xi)));

    let ucfg = UNetConfig { c_base: 4, stages: 1, heads: 2, norm_groups: 2, ..UNetConfig::default() };
    let unet = UNet::new(&ucfg, &mut rng(420)).unwrap();
    randomize_params(&unet, 421, 0.3);
    let (z, cond) = (leaf(&[1, 4, 4], 422), leaf(&[1, 4, 4], 423));
    let (zi, ci, ui) = (z.clone(), cond.clone(), unet.clone());
    c.push(Case::with_module("U-Net (tiny)", vec![z, cond], &unet, move || ui.forward(&zi, &ci, &[7], None)));
    c
}

pub fn all_cases() -> Vec<Case> {
    let mut c = op_cases();
    c.extend(conv_cases());
    c.extend(dsp_loss_cases());
    c.extend(attention_cases());
    c.extend(block_cases());
    c
}

/// Runs every case.
pub fn run_all() -> Vec<(String, CheckResult)> {
    all_cases().iter().map(|case| (case.name.clone(), check(case))).collect()
}
