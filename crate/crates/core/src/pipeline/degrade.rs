//! Synthetic degradations: contiguous masks and additive noise at a target SNR.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::wav::AudioClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradeKind {
    Mask,
    Noise,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationSpec {
    pub kind: DegradeKind,
    pub mask_ms: f32,
    pub snr_db: f32,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self { kind: DegradeKind::Mask, mask_ms: 250.0, snr_db: 10.0 }
    }
}

/// What [`degrade`] did.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DegradeMeta {
    /// `(start, len)` of the zeroed region in samples.
    pub mask: Option<(usize, usize)>,
    /// SNR of the mixture over active frames, when noise was added.
    pub snr_db: Option<f64>,
}

/// Mask length in samples.
pub fn mask_samples(mask_ms: f32, sample_rate: u32) -> usize {
    (mask_ms as f64 * sample_rate as f64 / 1000.0).round() as usize
}

/// Indices of samples inside frames (10 ms) whose energy lies within 40 dB
/// of the loudest frame.
pub fn active_samples(x: &[f32], sample_rate: u32) -> Vec<usize> {
    let frame = (sample_rate as usize / 100).max(1);
    let energies: Vec<f64> = x
        .chunks(frame)
        .map(|c| 10.0 * (c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / c.len() as f64 + 1e-20).log10())
        .collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    energies
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > max - 40.0)
        .flat_map(|(i, _)| i * frame..((i + 1) * frame).min(x.len()))
        .collect()
}

fn power_at(x: &[f32], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| (x[i] as f64).powi(2)).sum::<f64>() / idx.len().max(1) as f64
}

/// SNR in dB of `noise` relative to `clean`, both measured over the active
/// samples of `clean`.
pub fn snr_db(clean: &[f32], noise: &[f32], sample_rate: u32) -> f64 {
    let idx = active_samples(clean, sample_rate);
    10.0 * (power_at(clean, &idx) / power_at(noise, &idx)).log10()
}

/// Applies `spec` to `clip`. Noise is taken from `noise` (tiled to length)
/// or drawn as white Gaussian noise; it is added before masking.
pub fn degrade<R: Rng + ?Sized>(
    clip: &AudioClip,
    spec: &DegradationSpec,
    noise: Option<&[f32]>,
    rng: &mut R,
) -> Result<(AudioClip, DegradeMeta)> {
    let n = clip.len();
    let mut out = clip.samples.clone();
    let mut meta = DegradeMeta::default();
    if matches!(spec.kind, DegradeKind::Noise | DegradeKind::Both) {
        if !spec.snr_db.is_finite() {
            return Err(Error::InvalidArgument(format!("snr_db must be finite, got {}", spec.snr_db)));
        }
        let raw: Vec<f32> = match noise {
            Some(src) if !src.is_empty() => (0..n).map(|i| src[i % src.len()]).collect(),
            Some(_) => return Err(Error::InvalidArgument("noise source is empty".into())),
            None => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        };
        let idx = active_samples(&clip.samples, clip.sample_rate);
        let ps = power_at(&clip.samples, &idx);
        let pn = power_at(&raw, &idx);
        if pn <= 0.0 || ps <= 0.0 {
            return Err(Error::InvalidArgument("cannot mix noise into silence or with silent noise".into()));
        }
        let gain = (ps / (pn * 10f64.powf(spec.snr_db as f64 / 10.0))).sqrt();
        let scaled: Vec<f32> = raw.iter().map(|&v| (v as f64 * gain) as f32).collect();
        out.iter_mut().zip(&scaled).for_each(|(o, &s)| *o += s);
        meta.snr_db = Some(snr_db(&clip.samples, &scaled, clip.sample_rate));
    }
    if matches!(spec.kind, DegradeKind::Mask | DegradeKind::Both) {
        let len = mask_samples(spec.mask_ms, clip.sample_rate);
        if len > n {
            return Err(Error::InvalidArgument(format!(
                "mask of {} ms ({len} samples) longer than clip ({n} samples)",
                spec.mask_ms
            )));
        }
        if len > 0 {
            let start = rng.random_range(0..=n - len);
            out[start..start + len].fill(0.0);
            meta.mask = Some((start, len));
        }
    }
    Ok((AudioClip { samples: out, sample_rate: clip.sample_rate }, meta))
}
