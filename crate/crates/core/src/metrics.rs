//! Objective quality metrics: log-spectral distance and STOI.

use std::io::{BufRead, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{hann_window, resample, StftConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LsdConfig {
    pub n_fft: usize,
    pub hop_length: usize,
    pub power_floor: f64,
}

impl Default for LsdConfig {
    fn default() -> Self {
        Self { n_fft: 2048, hop_length: 512, power_floor: 1e-10 }
    }
}

/// Power spectra `|X|^2` per frame, periodic Hann, reflect-centered frames.
fn power_frames(x: &[f32], cfg: &StftConfig) -> Vec<Vec<f64>> {
    let pad = cfg.n_fft / 2;
    let n = x.len();
    let at = |i: isize| -> f32 {
        let j = if i < 0 {
            -i
        } else if i >= n as isize {
            2 * (n as isize - 1) - i
        } else {
            i
        };
        x[j.clamp(0, n as isize - 1) as usize]
    };
    let frames = cfg.n_frames(n);
    let win = hann_window(cfg.n_fft, true);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0f64, 0.0); cfg.n_fft];
    (0..frames)
        .map(|t| {
            let start = (t * cfg.hop_length) as isize - pad as isize;
            for (k, c) in buf.iter_mut().enumerate() {
                *c = Complex::new((at(start + k as isize) * win[k]) as f64, 0.0);
            }
            fft.process(&mut buf);
            buf[..cfg.n_bins()].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// Mean over frames of `sqrt(mean_k log10(P_ref / P_est)^2)` with both
/// powers floored.
pub fn lsd(reference: &[f32], estimate: &[f32], cfg: &LsdConfig) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::InvalidArgument(format!(
            "lsd needs equal lengths, got {} and {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.len() <= cfg.n_fft / 2 {
        return Err(Error::InvalidArgument(format!("lsd needs more than {} samples", cfg.n_fft / 2)));
    }
    if cfg.power_floor.is_nan() || cfg.power_floor <= 0.0 {
        return Err(Error::InvalidArgument("lsd power floor must be positive".into()));
    }
    let stft = StftConfig::new(cfg.n_fft, cfg.n_fft, cfg.hop_length);
    let pr = power_frames(reference, &stft);
    let pe = power_frames(estimate, &stft);
    let total: f64 = pr
        .iter()
        .zip(&pe)
        .map(|(a, b)| {
            let ms: f64 = a
                .iter()
                .zip(b)
                .map(|(&p, &q)| (p.max(cfg.power_floor) / q.max(cfg.power_floor)).log10().powi(2))
                .sum::<f64>()
                / a.len() as f64;
            ms.sqrt()
        })
        .sum();
    Ok(total / pr.len() as f64)
}

/// Constants of the short-time objective intelligibility measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoiConfig {
    pub fs: u32,
    pub frame_len: usize,
    pub nfft: usize,
    pub num_bands: usize,
    pub min_freq: f64,
    /// Frames per analysis segment (30 frames of 12.8 ms = 384 ms).
    pub segment: usize,
    /// Lower signal-to-distortion bound in dB.
    pub beta: f64,
    pub dyn_range: f64,
}

impl Default for StoiConfig {
    fn default() -> Self {
        Self { fs: 10_000, frame_len: 256, nfft: 512, num_bands: 15, min_freq: 150.0, segment: 30, beta: -15.0, dyn_range: 40.0 }
    }
}

const EPS: f64 = f64::EPSILON;

/// Symmetric Hann of length `n + 2` without its zero end points.
fn stoi_window(n: usize) -> Vec<f64> {
    (1..=n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n + 1) as f64).cos()).collect()
}

fn frame_starts(len: usize, frame: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(frame)).step_by(hop)
}

/// Drops frames more than `dyn_range` dB below the loudest reference frame
/// and overlap-adds the remainder.
fn remove_silent_frames(x: &[f64], y: &[f64], cfg: &StoiConfig) -> (Vec<f64>, Vec<f64>) {
    let (n, hop) = (cfg.frame_len, cfg.frame_len / 2);
    let w = stoi_window(n);
    let frames = |s: &[f64]| -> Vec<Vec<f64>> {
        frame_starts(s.len(), n, hop).map(|i| (0..n).map(|k| w[k] * s[i + k]).collect()).collect()
    };
    let (xf, yf) = (frames(x), frames(y));
    let energy: Vec<f64> = xf
        .iter()
        .map(|f| 20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + EPS).log10())
        .collect();
    let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..xf.len()).filter(|&i| max - cfg.dyn_range - energy[i] < 0.0).collect();
    let ola = |fr: &[Vec<f64>]| -> Vec<f64> {
        if keep.is_empty() {
            return Vec::new();
        }
        let mut out = vec![0.0; (keep.len() - 1) * hop + n];
        for (j, &i) in keep.iter().enumerate() {
            for k in 0..n {
                out[j * hop + k] += fr[i][k];
            }
        }
        out
    };
    (ola(&xf), ola(&yf))
}

/// Third-octave band envelopes `[bands][frames]`.
fn band_envelopes(x: &[f64], cfg: &StoiConfig, obm: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let (n, hop) = (cfg.frame_len, cfg.frame_len / 2);
    let w = stoi_window(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.nfft];
    let spectra: Vec<Vec<f64>> = frame_starts(x.len(), n, hop)
        .map(|i| {
            buf.fill(Complex::new(0.0, 0.0));
            for k in 0..n {
                buf[k] = Complex::new(w[k] * x[i + k], 0.0);
            }
            fft.process(&mut buf);
            buf[..cfg.nfft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect();
    obm.iter()
        .map(|&(lo, hi)| spectra.iter().map(|s| s[lo..hi].iter().sum::<f64>().sqrt()).collect())
        .collect()
}

/// Bin ranges `[lo, hi)` of the third-octave bands.
fn octave_bands(cfg: &StoiConfig) -> Vec<(usize, usize)> {
    let bins = cfg.nfft / 2 + 1;
    let freqs: Vec<f64> = (0..bins).map(|k| k as f64 * cfg.fs as f64 / cfg.nfft as f64).collect();
    let closest = |f: f64| -> usize {
        let mut best = 0;
        for (i, &v) in freqs.iter().enumerate() {
            if (v - f).powi(2) < (freqs[best] - f).powi(2) {
                best = i;
            }
        }
        best
    };
    (0..cfg.num_bands)
        .map(|k| {
            let cf = cfg.min_freq * 2f64.powf(k as f64 / 3.0);
            (closest(cf * 2f64.powf(-1.0 / 6.0)), closest(cf * 2f64.powf(1.0 / 6.0)))
        })
        .collect()
}

/// Short-time objective intelligibility of `estimate` against `reference`,
/// both sampled at `sample_rate`.
pub fn stoi(reference: &[f32], estimate: &[f32], sample_rate: u32, cfg: &StoiConfig) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::InvalidArgument(format!(
            "stoi needs equal lengths, got {} and {}",
            reference.len(),
            estimate.len()
        )));
    }
    let x: Vec<f64> = resample(reference, sample_rate, cfg.fs)?.into_iter().map(f64::from).collect();
    let y: Vec<f64> = resample(estimate, sample_rate, cfg.fs)?.into_iter().map(f64::from).collect();
    let (x, y) = remove_silent_frames(&x, &y, cfg);
    let obm = octave_bands(cfg);
    let xb = band_envelopes(&x, cfg, &obm);
    let yb = band_envelopes(&y, cfg, &obm);
    let frames = xb.first().map_or(0, Vec::len);
    if frames < cfg.segment {
        return Err(Error::InvalidArgument(format!(
            "stoi needs at least {} active frames ({} ms), got {frames}",
            cfg.segment,
            cfg.segment * cfg.frame_len / 2 * 1000 / cfg.fs as usize
        )));
    }
    let clip = 10f64.powf(-cfg.beta / 20.0);
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut total = 0.0;
    let mut count = 0usize;
    for m in cfg.segment..=frames {
        for (xr, yr) in xb.iter().zip(&yb) {
            let xs = &xr[m - cfg.segment..m];
            let ys = &yr[m - cfg.segment..m];
            let k = norm(xs) / (norm(ys) + EPS);
            let mut yp: Vec<f64> = ys.iter().zip(xs).map(|(&b, &a)| (b * k).min(a * (1.0 + clip))).collect();
            let mut xc = xs.to_vec();
            for v in [&mut yp, &mut xc] {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                v.iter_mut().for_each(|a| *a -= mean);
                let nv = norm(v) + EPS;
                v.iter_mut().for_each(|a| *a /= nv);
            }
            total += yp.iter().zip(&xc).map(|(a, b)| a * b).sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Scores of one evaluated file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileScores {
    pub path: String,
    pub lsd: f64,
    pub stoi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub lsd: f64,
    pub stoi: f64,
}

/// Line-delimited report: one `{"kind":"file",...}` record per file
/// followed by one `{"kind":"summary",...}` record.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub files: Vec<FileScores>,
    pub summary: Summary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    File(FileScores),
    Summary(Summary),
}

/// One reference/estimate pair to score.
pub struct EvalPair<'a> {
    pub path: String,
    pub reference: &'a [f32],
    pub estimate: &'a [f32],
}

pub fn evaluate_set(pairs: &[EvalPair<'_>], sample_rate: u32, lsd_cfg: &LsdConfig, stoi_cfg: &StoiConfig) -> Result<Report> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let files = pairs
        .iter()
        .map(|p| {
            Ok(FileScores {
                path: p.path.clone(),
                lsd: lsd(p.reference, p.estimate, lsd_cfg)?,
                stoi: stoi(p.reference, p.estimate, sample_rate, stoi_cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report::from_files(files))
}

impl Report {
    pub fn from_files(files: Vec<FileScores>) -> Self {
        let n = files.len().max(1) as f64;
        let summary = Summary {
            count: files.len(),
            lsd: files.iter().map(|f| f.lsd).sum::<f64>() / n,
            stoi: files.iter().map(|f| f.stoi).sum::<f64>() / n,
        };
        Self { files, summary }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for f in &self.files {
            writeln!(w, "{}", serde_json::to_string(&Record::File(f.clone())).map_err(io_err)?)?;
        }
        writeln!(w, "{}", serde_json::to_string(&Record::Summary(self.summary.clone())).map_err(io_err)?)?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut files = Vec::new();
        let mut summary = None;
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(io_err)? {
                Record::File(f) => files.push(f),
                Record::Summary(s) => summary = Some(s),
            }
        }
        let summary = summary.ok_or_else(|| Error::InvalidArgument("report has no summary record".into()))?;
        Ok(Self { files, summary })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn io_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
