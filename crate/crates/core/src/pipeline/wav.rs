//! WAV reading (PCM16 / float32, first channel) and PCM16 writing.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sample {i} = {} outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn wav_err(path: &Path, msg: impl ToString) -> Error {
    Error::Wav { path: path.to_path_buf(), msg: msg.to_string() }
}

pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let ch = spec.channels.max(1) as usize;
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .step_by(ch)
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .step_by(ch)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(wav_err(path, format!("unsupported sample format {fmt:?} with {bits} bits; use PCM16 or float32")))
        }
    };
    AudioClip::new(samples, spec.sample_rate).map_err(|e| wav_err(path, e))
}

/// Writes PCM16 mono; values are clamped to the representable range.
pub fn save_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate: clip.sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &v in &clip.samples {
        let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}
