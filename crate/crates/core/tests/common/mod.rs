//! Shared test helpers: a finite-difference gradient checker and the
//! catalogue of differentiable ops and blocks it is run against.

#![allow(dead_code)]

pub mod gradcheck;

use lldm_core::diffusion::stream_rng;
use lldm_core::dsp::{hann_window, StftConfig};
use lldm_core::{Module, SeededRng, Tensor};

pub fn rng(seed: u64) -> SeededRng {
    stream_rng(seed, 0)
}

/// Leaf tensor with `N(0, 1)` entries that tracks gradients.
pub fn leaf(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut rng(seed)).into_param()
}

/// Leaf whose entries stay at least `margin` away from zero, for ops with
/// a kink at the origin.
pub fn leaf_away_from_zero(shape: &[usize], seed: u64, margin: f32) -> Tensor {
    let t = Tensor::randn(shape, &mut rng(seed));
    let v = t.to_vec().into_iter().map(|x| x.signum() * (margin + x.abs())).collect();
    Tensor::new(v, shape).unwrap().into_param()
}

/// Overwrites every parameter with `scale * N(0, 1)` so that zero or
/// identity initializations do not hide gradient paths.
pub fn randomize_params(m: &dyn Module, seed: u64, scale: f32) {
    let mut r = rng(seed);
    for p in m.params() {
        let v = Tensor::randn(p.shape(), &mut r).to_vec().into_iter().map(|x| x * scale).collect();
        p.set_data(v).unwrap();
    }
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Reflect-padded, Hann-windowed frame `f` computed directly.
pub fn frame(x: &[f32], cfg: &StftConfig, f: usize) -> Vec<f64> {
    let pad = cfg.n_fft / 2;
    let win = hann_window(cfg.n_fft, true);
    (0..cfg.n_fft)
        .map(|i| {
            let p = (f * cfg.hop_length + i) as isize - pad as isize;
            let n = x.len() as isize;
            let idx = if p < 0 { -p } else if p >= n { 2 * (n - 1) - p } else { p };
            x[idx as usize] as f64 * win[i] as f64
        })
        .collect()
}

pub fn naive_dft(frame: &[f64]) -> Vec<(f64, f64)> {
    let n = frame.len();
    (0..=n / 2)
        .map(|k| {
            frame.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, &v)| {
                let ph = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                (re + v * ph.cos(), im + v * ph.sin())
            })
        })
        .collect()
}
