//! Deterministic toy corpus and dataset loading.
//!
//! Clean clips are speech-like: harmonic tones with gliding pitch under
//! syllable-rate envelopes, plus short noise bursts standing in for
//! fricatives. Noise clips are coloured noise for additive degradation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::wav::{load_wav, save_wav, AudioClip};
use crate::diffusion::stream_rng;
use crate::dsp::resample;
use crate::error::{Error, Result};

fn peak_normalize(x: &mut [f32], peak: f32) {
    let m = x.iter().fold(0f32, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

/// One speech-like clip of `len` samples.
pub fn synth_clip<R: Rng + ?Sized>(len: usize, sample_rate: u32, rng: &mut R) -> Vec<f32> {
    let sr = sample_rate as f64;
    let mut x = vec![0f64; len];
    let n_syl = rng.random_range(3..=6);
    let syl_len = len / n_syl;
    for s in 0..n_syl {
        let start = s * syl_len + rng.random_range(0..=syl_len / 8);
        let dur = (syl_len as f64 * rng.random_range(0.55..0.85)) as usize;
        let end = (start + dur).min(len);
        let f0a: f64 = rng.random_range(110.0..260.0);
        let f0b = f0a * rng.random_range(0.8..1.25);
        let n_harm = rng.random_range(4..=10);
        let tilt: f64 = rng.random_range(0.5..0.9);
        let mut phase = 0.0;
        for i in start..end {
            let u = (i - start) as f64 / dur.max(1) as f64;
            let env = (PI * u).sin().powi(2);
            let f0 = f0a + (f0b - f0a) * u;
            phase += 2.0 * PI * f0 / sr;
            let mut v = 0.0;
            for h in 1..=n_harm {
                if f0 * h as f64 >= sr / 2.0 {
                    break;
                }
                v += tilt.powi(h - 1) * (h as f64 * phase).sin();
            }
            x[i] += env * v;
        }
        if rng.random_bool(0.5) {
            let blen = (sr * rng.random_range(0.02..0.06)) as usize;
            let bstart = end.min(len.saturating_sub(blen));
            let amp: f64 = rng.random_range(0.2..0.6);
            let mut prev = 0.0;
            for i in bstart..(bstart + blen).min(len) {
                let u = (i - bstart) as f64 / blen as f64;
                let w: f64 = StandardNormal.sample(rng);
                let hp = w - prev;
                prev = w;
                x[i] += amp * (PI * u).sin() * hp;
            }
        }
    }
    for v in &mut x {
        let w: f64 = StandardNormal.sample(rng);
        *v += 1e-3 * w;
    }
    let mut out: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    peak_normalize(&mut out, 0.5);
    out
}

/// Low-passed (brown-ish) plus white noise, for additive degradation.
pub fn synth_noise<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f32> {
    let mut lp = 0.0f64;
    let mut out: Vec<f32> = (0..len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            lp = 0.98 * lp + 0.02 * w;
            (8.0 * lp + 0.3 * w) as f32
        })
        .collect();
    peak_normalize(&mut out, 0.5);
    out
}

/// `count` clean clips of `len` samples; clip `i` depends only on `(seed, i)`.
pub fn toy_corpus(count: usize, len: usize, sample_rate: u32, seed: u64) -> Vec<AudioClip> {
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            AudioClip { samples: synth_clip(len, sample_rate, &mut rng), sample_rate }
        })
        .collect()
}

/// Writes `clean_{i}.wav` and `noise_{i}.wav` files into `dir`.
pub fn write_corpus(dir: &Path, clean: usize, noise: usize, len: usize, sample_rate: u32, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (i, clip) in toy_corpus(clean, len, sample_rate, seed).iter().enumerate() {
        let p = dir.join(format!("clean_{i:03}.wav"));
        save_wav(clip, &p)?;
        paths.push(p);
    }
    for i in 0..noise {
        let mut rng = stream_rng(seed ^ 0x6e6f_6973_65, i as u64);
        let clip = AudioClip { samples: synth_noise(len, &mut rng), sample_rate };
        let p = dir.join(format!("noise_{i:03}.wav"));
        save_wav(&clip, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Sorted `.wav` files directly inside `dir`.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir)?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads every WAV in `dir` whose file name starts with `prefix`,
/// resampling to `sample_rate`.
pub fn load_dataset(dir: &Path, prefix: &str, sample_rate: u32) -> Result<Vec<AudioClip>> {
    let mut clips = Vec::new();
    for p in list_wavs(dir)? {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !name.starts_with(prefix) {
            continue;
        }
        let c = load_wav(&p)?;
        clips.push(if c.sample_rate == sample_rate {
            c
        } else {
            let mut s = resample(&c.samples, c.sample_rate, sample_rate)?;
            s.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            AudioClip { samples: s, sample_rate }
        });
    }
    if clips.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no WAV files starting with {prefix:?} in {}",
            dir.display()
        )));
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_bounded() {
        let a = toy_corpus(2, 4800, 48_000, 1);
        let b = toy_corpus(2, 4800, 48_000, 1);
        assert_eq!(a, b);
        assert_ne!(a[0].samples, a[1].samples);
        let peak = a[0].samples.iter().fold(0f32, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-6);
    }
}
