//! Two-stage training loops and the restoration front end.
//!
//! Every step draws its randomness from `stream_rng(seed, step)`, so a run
//! resumed from a checkpoint at step `k` replays exactly what an
//! uninterrupted run would have done from `k` on.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{Config, Stage, TrainConfig};
use super::degrade::degrade;
use super::optim::{clip_grad_norm, lr_schedule, Adam};
use super::wav::AudioClip;
use super::{pad_to_multiple, INIT_STREAM};
use crate::codec::Codec;
use crate::diffusion::{restore, stream_rng, training_step, VarianceSchedule};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::estimator::UNet;
use crate::losses::{
    default_resolutions, lsgan_gen_loss, spectral_loss, total_loss, LossComponents, MultiPeriodDiscriminator,
    MultiScaleMel, Reduction,
};
use crate::nn::Module;
use crate::tensor::{no_grad, Tensor};

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
    pub adv: f32,
    pub mel: f32,
    pub spectral: f32,
    pub fm: f32,
    pub disc: f32,
    pub grad_norm: f32,
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged { step, msg: format!("non-finite value in {op}") },
        other => other,
    }
}

fn check_finite(step: u64, what: &str, v: f32) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, msg: format!("{what} = {v}") })
    }
}

/// Random crop of `len` samples, zero-padded when the clip is shorter.
pub fn random_crop<R: Rng + ?Sized>(clip: &[f32], len: usize, rng: &mut R) -> Vec<f32> {
    if clip.len() <= len {
        let mut v = clip.to_vec();
        v.resize(len, 0.0);
        return v;
    }
    let start = rng.random_range(0..=clip.len() - len);
    clip[start..start + len].to_vec()
}

fn crop_batch<R: Rng + ?Sized>(data: &[AudioClip], tc: &TrainConfig, rng: &mut R) -> Result<Tensor> {
    let mut v = Vec::with_capacity(tc.batch_size * tc.segment_len);
    for _ in 0..tc.batch_size {
        let clip = &data[rng.random_range(0..data.len())];
        v.extend(random_crop(&clip.samples, tc.segment_len, rng));
    }
    Tensor::new(v, &[tc.batch_size, 1, tc.segment_len])
}

fn non_empty(data: &[AudioClip]) -> Result<()> {
    if data.is_empty() {
        Err(Error::InvalidArgument("training set is empty".into()))
    } else {
        Ok(())
    }
}

/// Writes checkpoints and the loss log into a run directory.
pub struct RunDir {
    pub dir: PathBuf,
    log: std::fs::File,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let log = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("loss.jsonl"))?;
        Ok(Self { dir: dir.to_path_buf(), log })
    }

    pub fn log(&mut self, entry: &StepLog) -> Result<()> {
        let line = serde_json::to_string(entry).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(self.log, "{line}")?;
        Ok(())
    }

    pub fn save(&self, ck: &Checkpoint, step: u64) -> Result<PathBuf> {
        let p = self.dir.join(format!("step_{step:08}.wldm"));
        ck.save(&p)?;
        ck.save(&self.dir.join("last.wldm"))?;
        Ok(p)
    }
}

/// Plain loss values of one generator evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecLosses {
    pub total: f32,
    pub adv: f32,
    pub mel: f32,
    pub spectral: f32,
    pub fm: f32,
}

/// Stage 1: codec generator against the multi-period discriminator.
pub struct CodecTrainer {
    pub cfg: Config,
    pub codec: Codec,
    pub disc: MultiPeriodDiscriminator,
    pub mel_loss: MultiScaleMel,
    pub resolutions: Vec<StftConfig>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
}

impl CodecTrainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, INIT_STREAM);
        let codec = Codec::new(&cfg.codec, &mut rng)?;
        let disc = MultiPeriodDiscriminator::new(&cfg.discriminator, &mut rng);
        let tc = &cfg.codec_train;
        Ok(Self {
            opt_g: Adam::new(codec.named_params("codec"), tc.adam),
            opt_d: Adam::new(disc.named_params("disc"), tc.adam),
            mel_loss: MultiScaleMel::standard(cfg.codec.sample_rate)?,
            resolutions: default_resolutions(),
            cfg: cfg.clone(),
            codec,
            disc,
            step: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        let tc = &self.cfg.codec_train;
        lr_schedule(self.step, tc.lr, tc.lr_gamma, tc.lr_interval)
    }

    /// Generator objective on `x` with `x_hat` attached to the graph.
    fn generator_losses(&self, x: &Tensor, x_hat: &Tensor) -> Result<(Tensor, LossComponents)> {
        let w = &self.cfg.loss_weights;
        let real = no_grad(|| self.disc.forward(x))?;
        let fake = self.disc.forward(x_hat)?;
        let mut adv = lsgan_gen_loss(&fake[0].score)?;
        for f in &fake[1..] {
            adv = adv.add(&lsgan_gen_loss(&f.score)?)?;
        }
        let c = LossComponents {
            adv,
            mel: self.mel_loss.loss(x, x_hat)?,
            spectral: spectral_loss(x, x_hat, &self.resolutions, Reduction::Mean)?,
            fm: MultiPeriodDiscriminator::feature_loss(&real, &fake, w.fm_layer)?,
        };
        Ok((total_loss(&c, w)?, c))
    }

    /// Mel and spectral terms only, used before `disc_start`.
    fn reconstruction_losses(&self, x: &Tensor, x_hat: &Tensor) -> Result<(Tensor, LossComponents)> {
        let c = LossComponents {
            adv: Tensor::scalar(0.0),
            mel: self.mel_loss.loss(x, x_hat)?,
            spectral: spectral_loss(x, x_hat, &self.resolutions, Reduction::Mean)?,
            fm: Tensor::scalar(0.0),
        };
        Ok((total_loss(&c, &self.cfg.loss_weights)?, c))
    }

    /// Loss terms on a fixed batch without updating anything.
    pub fn evaluate(&self, x: &Tensor) -> Result<CodecLosses> {
        no_grad(|| {
            let out = self.codec.forward(x, None)?;
            let (total, c) = self.generator_losses(x, &out.x_hat)?;
            Ok(CodecLosses {
                total: total.item()?,
                adv: c.adv.item()?,
                mel: c.mel.item()?,
                spectral: c.spectral.item()?,
                fm: c.fm.item()?,
            })
        })
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, data: &[AudioClip]) -> Result<StepLog> {
        non_empty(data)?;
        let step = self.step;
        self.inner_step(data).map_err(|e| diverged(step, e))
    }

    fn inner_step(&mut self, data: &[AudioClip]) -> Result<StepLog> {
        let step = self.step;
        let lr = self.lr();
        let tc = self.cfg.codec_train.clone();
        let mut rng = stream_rng(self.cfg.seed, step);
        let x = crop_batch(data, &tc, &mut rng)?;
        let out = self.codec.forward(&x, Some(&mut rng))?;

        let adversarial = step >= tc.disc_start;
        let mut disc = 0.0;
        if adversarial {
            self.opt_d.zero_grad();
            let real = self.disc.forward(&x)?;
            let fake = self.disc.forward(&out.x_hat.detach())?;
            let (_, d_loss) = crate::losses::adversarial_losses(&real, &fake)?;
            disc = d_loss.item()?;
            check_finite(step, "discriminator loss", disc)?;
            d_loss.backward()?;
            if tc.grad_clip > 0.0 {
                clip_grad_norm(&self.opt_d.params, tc.grad_clip);
            }
            self.opt_d.step(lr as f32)?;
        }

        self.opt_g.zero_grad();
        let (total, c) = if adversarial {
            self.generator_losses(&x, &out.x_hat)?
        } else {
            self.reconstruction_losses(&x, &out.x_hat)?
        };
        let loss = total.item()?;
        check_finite(step, "generator loss", loss)?;
        total.backward()?;
        let grad_norm = if tc.grad_clip > 0.0 {
            clip_grad_norm(&self.opt_g.params, tc.grad_clip)
        } else {
            clip_grad_norm(&self.opt_g.params, f32::INFINITY)
        };
        self.opt_g.step(lr as f32)?;
        self.step += 1;
        Ok(StepLog {
            step,
            lr,
            loss,
            adv: c.adv.item()?,
            mel: c.mel.item()?,
            spectral: c.spectral.item()?,
            fm: c.fm.item()?,
            disc,
            grad_norm,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.insert_str("meta.config", &self.cfg.to_toml_string()?)?;
        ck.insert_str("meta.stage", "codec")?;
        ck.insert_u64("meta.step", self.step)?;
        ck.insert_module("codec", &self.codec)?;
        ck.insert_module("disc", &self.disc)?;
        self.opt_g.save_state(&mut ck, "opt_g")?;
        self.opt_d.save_state(&mut ck, "opt_d")?;
        Ok(ck)
    }

    /// Restores parameters, optimizer state and step; the stored config is
    /// used with `overrides` applied on top.
    pub fn from_checkpoint(ck: &Checkpoint, overrides: &[String]) -> Result<Self> {
        expect_stage(ck, "codec")?;
        let cfg = Config::from_toml_str(&ck.get_str("meta.config")?, overrides)?;
        let mut t = Self::new(&cfg)?;
        ck.load_module("codec", &t.codec)?;
        ck.load_module("disc", &t.disc)?;
        t.opt_g.load_state(ck, "opt_g")?;
        t.opt_d.load_state(ck, "opt_d")?;
        t.step = ck.get_u64("meta.step")?;
        Ok(t)
    }

    /// Trains until `codec_train.steps`, logging and checkpointing into `run`.
    pub fn run(&mut self, data: &[AudioClip], mut run: Option<&mut RunDir>, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        let tc = self.cfg.codec_train.clone();
        while self.step < tc.steps {
            let log = self.train_step(data)?;
            if tc.log_every > 0 && (log.step % tc.log_every == 0 || self.step == tc.steps) {
                on_step(&log);
                if let Some(r) = run.as_deref_mut() {
                    r.log(&log)?;
                }
            }
            if let Some(r) = run.as_deref_mut() {
                if self.step == tc.steps || (tc.checkpoint_every > 0 && self.step.is_multiple_of(tc.checkpoint_every)) {
                    r.save(&self.to_checkpoint()?, self.step)?;
                }
            }
        }
        Ok(())
    }
}

fn expect_stage(ck: &Checkpoint, stage: &str) -> Result<()> {
    let s = ck.get_str("meta.stage")?;
    if s != stage {
        return Err(Error::Checkpoint(format!("expected a {stage} checkpoint, found {s}")));
    }
    Ok(())
}

/// Loads a frozen codec from a stage-1 or stage-2 checkpoint.
pub fn load_codec(ck: &Checkpoint) -> Result<Codec> {
    let cfg = Config::from_toml_str(&ck.get_str("meta.config")?, &[])?;
    let codec = Codec::new(&cfg.codec, &mut stream_rng(cfg.seed, INIT_STREAM))?;
    ck.load_module("codec", &codec)?;
    Ok(codec)
}

/// Stage 2: noise estimator on pairs of (clean, degraded) codec latents.
pub struct DiffusionTrainer {
    pub cfg: Config,
    pub codec: Codec,
    pub unet: UNet,
    pub schedule: VarianceSchedule,
    pub opt: Adam,
    /// Codec latents are divided by this before diffusion.
    pub latent_scale: f32,
    pub step: u64,
}

impl DiffusionTrainer {
    /// `cfg.codec` must match the architecture stored in `codec_ck`.
    pub fn new(cfg: &Config, codec_ck: &Checkpoint, data: &[AudioClip]) -> Result<Self> {
        cfg.validate()?;
        non_empty(data)?;
        let codec = load_codec(codec_ck)?;
        if codec.cfg != cfg.codec {
            return Err(Error::Config("codec section differs from the codec checkpoint".into()));
        }
        let unet = UNet::new(&cfg.unet, &mut stream_rng(cfg.seed, INIT_STREAM + 1))?;
        let mut t = Self {
            opt: Adam::new(unet.named_params("unet"), cfg.diffusion_train.adam),
            schedule: cfg.schedule.build()?,
            cfg: cfg.clone(),
            codec,
            unet,
            latent_scale: 1.0,
            step: 0,
        };
        t.latent_scale = t.measure_latent_scale(data)?;
        Ok(t)
    }

    /// Standard deviation of clean latents over one batch of crops.
    fn measure_latent_scale(&self, data: &[AudioClip]) -> Result<f32> {
        let mut rng = stream_rng(self.cfg.seed, INIT_STREAM + 2);
        let x = crop_batch(data, &self.cfg.diffusion_train, &mut rng)?;
        let z = no_grad(|| self.codec.latent(&x))?.to_vec();
        let n = z.len() as f64;
        let mean = z.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = z.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let s = var.sqrt() as f32;
        if !(s > 1e-6) {
            return Err(Error::InvalidArgument(format!("codec latents have degenerate scale {s}")));
        }
        Ok(s)
    }

    pub fn lr(&self) -> f64 {
        let tc = &self.cfg.diffusion_train;
        lr_schedule(self.step, tc.lr, tc.lr_gamma, tc.lr_interval)
    }

    /// Scaled latents `(z0, cond)` of clean crops and their degraded copies.
    pub fn pair<R: Rng + ?Sized>(&self, data: &[AudioClip], noise: Option<&[f32]>, rng: &mut R) -> Result<(Tensor, Tensor)> {
        let tc = &self.cfg.diffusion_train;
        let sr = self.cfg.codec.sample_rate;
        let clean = crop_batch(data, tc, rng)?;
        let mut bad = Vec::with_capacity(clean.numel());
        for row in clean.data().chunks(tc.segment_len) {
            let clip = AudioClip { samples: row.to_vec(), sample_rate: sr };
            let (d, _) = degrade(&clip, &self.cfg.degradation, noise, rng)?;
            bad.extend(d.samples);
        }
        let bad = Tensor::new(bad, clean.shape())?;
        let k = 1.0 / self.latent_scale;
        no_grad(|| Ok((self.codec.latent(&clean)?.scale(k)?, self.codec.latent(&bad)?.scale(k)?)))
    }

    /// One optimizer step on given latents; `rng` draws `t` and the noise.
    pub fn step_on<R: Rng + ?Sized>(&mut self, z0: &Tensor, cond: &Tensor, rng: &mut R) -> Result<StepLog> {
        let step = self.step;
        let lr = self.lr();
        self.opt.zero_grad();
        let loss = training_step(&self.unet, &self.schedule, z0, cond, rng).map_err(|e| diverged(step, e))?;
        let v = loss.item()?;
        check_finite(step, "diffusion loss", v)?;
        loss.backward().map_err(|e| diverged(step, e))?;
        let clip = self.cfg.diffusion_train.grad_clip;
        let grad_norm = clip_grad_norm(&self.opt.params, if clip > 0.0 { clip } else { f32::INFINITY });
        self.opt.step(lr as f32)?;
        self.step += 1;
        Ok(StepLog { step, lr, loss: v, adv: 0.0, mel: 0.0, spectral: 0.0, fm: 0.0, disc: 0.0, grad_norm })
    }

    pub fn train_step(&mut self, data: &[AudioClip], noise: Option<&[f32]>) -> Result<StepLog> {
        non_empty(data)?;
        let mut rng = stream_rng(self.cfg.seed, self.step);
        let (z0, cond) = self.pair(data, noise, &mut rng)?;
        self.step_on(&z0, &cond, &mut rng)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.insert_str("meta.config", &self.cfg.to_toml_string()?)?;
        ck.insert_str("meta.stage", "diffusion")?;
        ck.insert_u64("meta.step", self.step)?;
        ck.insert("meta.latent_scale", &[1], vec![self.latent_scale])?;
        ck.insert_module("codec", &self.codec)?;
        ck.insert_module("unet", &self.unet)?;
        self.opt.save_state(&mut ck, "opt")?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, overrides: &[String]) -> Result<Self> {
        expect_stage(ck, "diffusion")?;
        let cfg = Config::from_toml_str(&ck.get_str("meta.config")?, overrides)?;
        let codec = load_codec(ck)?;
        let unet = UNet::new(&cfg.unet, &mut stream_rng(cfg.seed, INIT_STREAM + 1))?;
        ck.load_module("unet", &unet)?;
        let mut opt = Adam::new(unet.named_params("unet"), cfg.diffusion_train.adam);
        opt.load_state(ck, "opt")?;
        Ok(Self {
            schedule: cfg.schedule.build()?,
            latent_scale: ck.get_shaped("meta.latent_scale", &[1])?[0],
            step: ck.get_u64("meta.step")?,
            cfg,
            codec,
            unet,
            opt,
        })
    }

    pub fn run(
        &mut self,
        data: &[AudioClip],
        noise: Option<&[f32]>,
        mut run: Option<&mut RunDir>,
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<()> {
        let tc = self.cfg.diffusion_train.clone();
        while self.step < tc.steps {
            let log = self.train_step(data, noise)?;
            if tc.log_every > 0 && (log.step % tc.log_every == 0 || self.step == tc.steps) {
                on_step(&log);
                if let Some(r) = run.as_deref_mut() {
                    r.log(&log)?;
                }
            }
            if let Some(r) = run.as_deref_mut() {
                if self.step == tc.steps || (tc.checkpoint_every > 0 && self.step.is_multiple_of(tc.checkpoint_every)) {
                    r.save(&self.to_checkpoint()?, self.step)?;
                }
            }
        }
        Ok(())
    }

    pub fn restorer(&self) -> Restorer {
        Restorer {
            codec: self.codec.clone(),
            unet: self.unet.clone(),
            schedule: self.schedule.clone(),
            latent_scale: self.latent_scale,
        }
    }
}

/// Inference bundle loaded from a stage-2 checkpoint.
#[derive(Debug, Clone)]
pub struct Restorer {
    pub codec: Codec,
    pub unet: UNet,
    pub schedule: VarianceSchedule,
    pub latent_scale: f32,
}

impl Restorer {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        expect_stage(ck, "diffusion")?;
        let cfg = Config::from_toml_str(&ck.get_str("meta.config")?, &[])?;
        let unet = UNet::new(&cfg.unet, &mut stream_rng(cfg.seed, INIT_STREAM + 1))?;
        ck.load_module("unet", &unet)?;
        Ok(Self {
            codec: load_codec(ck)?,
            unet,
            schedule: cfg.schedule.build()?,
            latent_scale: ck.get_shaped("meta.latent_scale", &[1])?[0],
        })
    }

    /// Length granularity of [`Restorer::restore`] before trimming.
    pub fn multiple(&self) -> usize {
        self.codec.cfg.length_multiple() * self.unet.cfg.multiple()
    }

    /// Restores a waveform of any length at the codec sample rate; the
    /// output has the input length and lies in `[-1, 1]`.
    pub fn restore(&self, clip: &AudioClip, seed: u64) -> Result<AudioClip> {
        if clip.sample_rate != self.codec.cfg.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "input is {} Hz but the model runs at {} Hz; resample first",
                clip.sample_rate, self.codec.cfg.sample_rate
            )));
        }
        let n = clip.len();
        let padded = pad_to_multiple(&clip.samples, self.multiple(), self.codec.cfg.n_fft);
        let x = Tensor::new(padded.clone(), &[1, 1, padded.len()])?;
        let y = restore(&x, &self.codec, &self.unet, &self.schedule, self.latent_scale, seed)?;
        let mut out = y.to_vec();
        out.truncate(n);
        out.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        AudioClip::new(out, clip.sample_rate)
    }

    /// Codec-only round trip, the baseline for restoration.
    pub fn reconstruct(&self, clip: &AudioClip) -> Result<AudioClip> {
        let n = clip.len();
        let padded = pad_to_multiple(&clip.samples, self.codec.cfg.length_multiple(), self.codec.cfg.n_fft);
        let x = Tensor::new(padded.clone(), &[1, 1, padded.len()])?;
        let y = no_grad(|| self.codec.forward(&x, None))?.x_hat;
        let mut out = y.to_vec();
        out.truncate(n);
        out.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        AudioClip::new(out, clip.sample_rate)
    }
}

/// Stage of a checkpoint, from its metadata.
pub fn checkpoint_stage(ck: &Checkpoint) -> Result<Stage> {
    match ck.get_str("meta.stage")?.as_str() {
        "codec" => Ok(Stage::Codec),
        "diffusion" => Ok(Stage::Diffusion),
        s => Err(Error::Checkpoint(format!("unknown stage {s}"))),
    }
}
