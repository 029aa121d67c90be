//! STFT, mel filterbank, log-mel features and a windowed-sinc resampler.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{PadMode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    /// Reflect-pad `n_fft / 2` samples on both sides before framing.
    pub center: bool,
}

impl StftConfig {
    pub fn new(n_fft: usize, win_length: usize, hop_length: usize) -> Self {
        Self { n_fft, win_length, hop_length, center: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 || self.hop_length > self.win_length || self.win_length > self.n_fft {
            return Err(Error::InvalidArgument(format!(
                "STFT config needs 0 < hop <= win <= n_fft, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames produced for a signal of `n` samples.
    pub fn n_frames(&self, n: usize) -> usize {
        let padded = if self.center { n + 2 * (self.n_fft / 2) } else { n };
        if padded < self.n_fft {
            0
        } else {
            1 + (padded - self.n_fft) / self.hop_length
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mel: usize,
    pub f_min: f32,
    pub f_max: f32,
    pub log_floor: f32,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { sample_rate: 48_000, n_mel: 160, f_min: 0.0, f_max: 24_000.0, log_floor: 1e-5 }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let nyq = self.sample_rate as f32 / 2.0;
        if self.n_mel == 0 || self.f_min < 0.0 || self.f_min >= self.f_max || self.f_max > nyq {
            return Err(Error::InvalidArgument(format!(
                "mel config needs n_mel >= 1 and 0 <= f_min < f_max <= {nyq}, got {self:?}"
            )));
        }
        if self.log_floor.is_nan() || self.log_floor <= 0.0 {
            return Err(Error::InvalidArgument("log_floor must be positive".into()));
        }
        Ok(())
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Hann window of length `n`. The periodic form suits spectral analysis.
pub fn hann_window(n: usize, periodic: bool) -> Vec<f32> {
    let denom = if periodic { n } else { n.saturating_sub(1).max(1) } as f64;
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / denom).cos()) as f32)
        .collect()
}

/// Periodic Hann window of `win_length`, zero-padded to `n_fft` and centered.
fn analysis_window(cfg: &StftConfig) -> Vec<f32> {
    let mut w = vec![0.0f32; cfg.n_fft];
    let off = (cfg.n_fft - cfg.win_length) / 2;
    w[off..off + cfg.win_length].copy_from_slice(&hann_window(cfg.win_length, true));
    w
}

fn as_batch_signal(op: &'static str, signal: &Tensor) -> Result<Tensor> {
    match signal.shape() {
        [b, 1, n] => signal.reshape(&[*b, *n]),
        [_, _] => Ok(signal.clone()),
        s => shape_err(op, format!("signal must be [B, 1, N] or [B, N], got {s:?}")),
    }
}

/// Frame-major STFT: `[B, N] -> [B, frames, n_fft/2 + 1, 2]`.
fn stft_frames(signal: &Tensor, cfg: &StftConfig) -> Result<Tensor> {
    cfg.validate()?;
    let x = as_batch_signal("stft", signal)?;
    let n = x.dim(1);
    let x = if cfg.center {
        let p = cfg.n_fft / 2;
        if p >= n {
            return shape_err("stft", format!("signal of {n} samples too short to reflect-pad by {p}"));
        }
        x.pad_last(p, p, PadMode::Reflect)?
    } else {
        x
    };
    let (b, np) = (x.dim(0), x.dim(1));
    if np < cfg.n_fft {
        return shape_err("stft", format!("signal of {np} samples shorter than one frame ({})", cfg.n_fft));
    }
    let (nf, hop, frames, bins) = (cfg.n_fft, cfg.hop_length, 1 + (np - cfg.n_fft) / cfg.hop_length, cfg.n_bins());
    let win = Arc::new(analysis_window(cfg));
    let mut planner = FftPlanner::<f32>::new();
    let fwd = planner.plan_fft_forward(nf);
    let inv: Arc<dyn Fft<f32>> = planner.plan_fft_inverse(nf);
    let mut out = vec![0.0f32; b * frames * bins * 2];
    {
        let xd = x.data();
        let mut buf = vec![Complex::new(0.0f32, 0.0); nf];
        let mut scratch = vec![Complex::new(0.0f32, 0.0); fwd.get_inplace_scratch_len()];
        for bi in 0..b {
            let row = &xd[bi * np..(bi + 1) * np];
            for t in 0..frames {
                let seg = &row[t * hop..t * hop + nf];
                buf.iter_mut().zip(seg.iter().zip(win.iter())).for_each(|(c, (&s, &w))| *c = Complex::new(s * w, 0.0));
                fwd.process_with_scratch(&mut buf, &mut scratch);
                let dst = &mut out[(bi * frames + t) * bins * 2..][..bins * 2];
                for (k, c) in buf[..bins].iter().enumerate() {
                    dst[2 * k] = c.re;
                    dst[2 * k + 1] = c.im;
                }
            }
        }
    }
    Tensor::from_op("stft", vec![b, frames, bins, 2], out, vec![x.clone()], move |g, _| {
        let mut gx = vec![0.0f32; b * np];
        let mut buf = vec![Complex::new(0.0f32, 0.0); nf];
        let mut scratch = vec![Complex::new(0.0f32, 0.0); inv.get_inplace_scratch_len()];
        for bi in 0..b {
            for t in 0..frames {
                let src = &g[(bi * frames + t) * bins * 2..][..bins * 2];
                buf.fill(Complex::new(0.0, 0.0));
                for k in 0..bins {
                    buf[k] = Complex::new(src[2 * k], src[2 * k + 1]);
                }
                inv.process_with_scratch(&mut buf, &mut scratch);
                let dst = &mut gx[bi * np + t * hop..][..nf];
                for ((d, c), &w) in dst.iter_mut().zip(&buf).zip(win.iter()) {
                    *d += w * c.re;
                }
            }
        }
        vec![Some(gx)]
    })
}

/// Short-time Fourier transform of `[B, 1, N]` (or `[B, N]`), returning
/// `[B, n_fft/2 + 1, frames, 2]` with real and imaginary parts last.
pub fn stft(signal: &Tensor, cfg: &StftConfig) -> Result<Tensor> {
    stft_frames(signal, cfg)?.permute(&[0, 2, 1, 3])
}

/// `sqrt(re^2 + im^2)` over a trailing axis of size 2. The gradient is
/// taken as zero where the magnitude vanishes.
pub fn complex_abs(z: &Tensor) -> Result<Tensor> {
    let shape = z.shape();
    if shape.last() != Some(&2) || shape.len() < 2 {
        return shape_err("complex_abs", format!("expected trailing axis of size 2, got {shape:?}"));
    }
    let out_shape = shape[..shape.len() - 1].to_vec();
    let data: Vec<f32> = z.data().chunks_exact(2).map(|c| c[0].hypot(c[1])).collect();
    let zc = z.clone();
    Tensor::from_op("complex_abs", out_shape, data, vec![z.clone()], move |g, y| {
        let zd = zc.data();
        let mut gz = vec![0.0f32; zd.len()];
        for i in 0..y.len() {
            if y[i] > 0.0 {
                gz[2 * i] = g[i] * zd[2 * i] / y[i];
                gz[2 * i + 1] = g[i] * zd[2 * i + 1] / y[i];
            }
        }
        vec![Some(gz)]
    })
}

/// Magnitude spectrogram `[B, frames, bins]`, frame-major.
pub fn magnitude_frames(signal: &Tensor, cfg: &StftConfig) -> Result<Tensor> {
    complex_abs(&stft_frames(signal, cfg)?)
}

/// Magnitude spectrogram `[B, bins, frames]`.
pub fn magnitude(signal: &Tensor, cfg: &StftConfig) -> Result<Tensor> {
    magnitude_frames(signal, cfg)?.transpose(1, 2)
}

/// Triangular HTK-mel filterbank `[n_mel, n_fft/2 + 1]` with unit peaks.
pub fn mel_filterbank(cfg: &MelConfig, n_fft: usize) -> Result<Tensor> {
    cfg.validate()?;
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min as f64), hz_to_mel(cfg.f_max as f64));
    let pts: Vec<f64> = (0..cfg.n_mel + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mel + 1) as f64))
        .collect();
    let mut w = vec![0.0f32; cfg.n_mel * bins];
    for m in 0..cfg.n_mel {
        let (f0, f1, f2) = (pts[m], pts[m + 1], pts[m + 2]);
        let row = &mut w[m * bins..(m + 1) * bins];
        for (k, v) in row.iter_mut().enumerate() {
            let f = k as f64 * cfg.sample_rate as f64 / n_fft as f64;
            let up = (f - f0) / (f1 - f0);
            let down = (f2 - f) / (f2 - f1);
            *v = up.min(down).max(0.0) as f32;
        }
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mel filter {m} ({f0:.1}-{f2:.1} Hz) covers no FFT bin; reduce n_mel or raise n_fft"
            )));
        }
    }
    Tensor::new(w, &[cfg.n_mel, bins])
}

/// Log-mel front-end with a cached filterbank.
#[derive(Debug, Clone)]
pub struct LogMel {
    pub stft: StftConfig,
    pub mel: MelConfig,
    /// Transposed filterbank `[bins, n_mel]`.
    fb_t: Tensor,
}

impl LogMel {
    pub fn new(stft: StftConfig, mel: MelConfig) -> Result<Self> {
        stft.validate()?;
        let fb = mel_filterbank(&mel, stft.n_fft)?;
        Ok(Self { stft, mel, fb_t: fb.transpose(0, 1)? })
    }

    pub fn filterbank(&self) -> Result<Tensor> {
        self.fb_t.transpose(0, 1)
    }

    /// `log(max(mel @ |STFT(x)|, floor))`, shaped `[B, n_mel, frames]`.
    pub fn forward(&self, signal: &Tensor) -> Result<Tensor> {
        let mag = magnitude_frames(signal, &self.stft)?;
        mag.matmul(&self.fb_t)?.clamp_min(self.mel.log_floor)?.log()?.transpose(1, 2)
    }
}

/// Convenience wrapper building the filterbank on each call.
pub fn log_mel_spectrogram(signal: &Tensor, stft: &StftConfig, mel: &MelConfig) -> Result<Tensor> {
    LogMel::new(*stft, *mel)?.forward(signal)
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Band-limited rational resampling with a Hann-windowed sinc kernel
/// spanning `zero_crossings` lobes on each side of the cutoff.
pub fn resample(x: &[f32], from: u32, to: u32) -> Result<Vec<f32>> {
    if from == 0 || to == 0 {
        return Err(Error::InvalidArgument("sample rates must be positive".into()));
    }
    if from == to {
        return Ok(x.to_vec());
    }
    const ZERO_CROSSINGS: f64 = 16.0;
    let g = gcd(from, to);
    let (up, down) = ((to / g) as usize, (from / g) as usize);
    // Cutoff relative to the input Nyquist, slightly below to leave a transition band.
    let cutoff = 0.97 * (to as f64 / from as f64).min(1.0);
    let half = (ZERO_CROSSINGS / cutoff).ceil() as isize;
    let n_out = (x.len() * up).div_ceil(down);
    // One tap table per output phase.
    let taps: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut row: Vec<f64> = (-half + 1..=half)
                .map(|j| {
                    let u = frac - j as f64;
                    let win = if u.abs() < half as f64 { 0.5 * (1.0 + (PI * u / half as f64).cos()) } else { 0.0 };
                    let arg = PI * cutoff * u;
                    let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
                    cutoff * sinc * win
                })
                .collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            row
        })
        .collect();
    let y = (0..n_out)
        .map(|m| {
            let pos = m * down;
            let (n0, p) = ((pos / up) as isize, pos % up);
            taps[p]
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    let n = n0 + (i as isize - half + 1);
                    if n >= 0 && (n as usize) < x.len() {
                        h * x[n as usize] as f64
                    } else {
                        0.0
                    }
                })
                .sum::<f64>() as f32
        })
        .collect();
    Ok(y)
}
