use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lldm_core::dsp::resample;
use lldm_core::metrics::{evaluate_set, EvalPair, LsdConfig, StoiConfig};
use lldm_core::pipeline::corpus::{list_wavs, load_dataset, write_corpus};
use lldm_core::pipeline::train::{checkpoint_stage, CodecTrainer, DiffusionTrainer, Restorer, RunDir, StepLog};
use lldm_core::pipeline::{load_wav, save_wav, AudioClip, Checkpoint, Config};

#[derive(Parser)]
#[command(name = "lldm", version, about = "Latent diffusion speech restoration")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy corpus (clean speech-like clips and noise clips).
    MakeCorpus(MakeCorpusArgs),
    /// Stage 1: train the neural audio codec.
    TrainCodec(TrainCodecArgs),
    /// Stage 2: train the latent noise estimator on a frozen codec.
    TrainDiffusion(TrainDiffusionArgs),
    /// Restore a noisy recording.
    Enhance(RestoreArgs),
    /// Fill a silent gap, optionally zeroing it first with --mask.
    Inpaint(InpaintArgs),
    /// Score estimates against references (LSD, STOI).
    Evaluate(EvaluateArgs),
    /// List the entries of a checkpoint.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set codec_train.steps=500 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut v = self.set.clone();
        if let Some(s) = self.seed {
            v.push(format!("seed={s}"));
        }
        v
    }

    fn load(&self) -> Result<Config> {
        Ok(Config::load(self.config.as_deref(), &self.overrides())?)
    }
}

#[derive(Args)]
struct MakeCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    clean: usize,
    #[arg(long, default_value_t = 4)]
    noise: usize,
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
    #[arg(long, default_value_t = 48_000)]
    sample_rate: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainCodecArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory of training WAVs (files starting with --prefix).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "clean")]
    prefix: String,
    /// Run directory for checkpoints and loss.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a codec checkpoint; its stored config is used with --set on top.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TrainDiffusionArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "clean")]
    prefix: String,
    /// Stage-1 checkpoint; required unless resuming.
    #[arg(long)]
    codec: Option<PathBuf>,
    /// WAV file or directory of noise files for additive degradation.
    #[arg(long)]
    noise: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RestoreArgs {
    /// Stage-2 checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InpaintArgs {
    #[command(flatten)]
    io: RestoreArgs,
    /// Zero START_MS:LEN_MS of the input before restoring.
    #[arg(long, value_name = "START_MS:LEN_MS")]
    mask: Option<String>,
    /// Also write the masked input here.
    #[arg(long)]
    save_masked: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of clean reference WAVs.
    #[arg(long)]
    reference: PathBuf,
    /// Directory of estimates with the same file names.
    #[arg(long)]
    estimate: PathBuf,
    /// Report path (line-delimited JSON).
    #[arg(long)]
    report: PathBuf,
    /// Unused by the metrics; accepted for uniformity.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
    /// Also print the stored config.
    #[arg(long)]
    config: bool,
}

fn print_step(l: &StepLog) {
    if l.disc != 0.0 || l.mel != 0.0 {
        println!(
            "step {:>7}  lr {:.3e}  loss {:.4}  mel {:.4}  spec {:.4}  adv {:.4}  fm {:.4}  disc {:.4}",
            l.step, l.lr, l.loss, l.mel, l.spectral, l.adv, l.fm, l.disc
        );
    } else {
        println!("step {:>7}  lr {:.3e}  loss {:.5}  |g| {:.3}", l.step, l.lr, l.loss, l.grad_norm);
    }
}

fn load_noise(path: &Path, sample_rate: u32) -> Result<Vec<f32>> {
    let files = if path.is_dir() { list_wavs(path)? } else { vec![path.to_path_buf()] };
    let mut out = Vec::new();
    for f in files {
        out.extend(to_rate(load_wav(&f)?, sample_rate)?.samples);
    }
    if out.is_empty() {
        bail!("no noise samples found in {}", path.display());
    }
    Ok(out)
}

fn to_rate(clip: AudioClip, sample_rate: u32) -> Result<AudioClip> {
    if clip.sample_rate == sample_rate {
        return Ok(clip);
    }
    let mut s = resample(&clip.samples, clip.sample_rate, sample_rate)?;
    s.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(AudioClip::new(s, sample_rate)?)
}

fn make_corpus(a: MakeCorpusArgs) -> Result<()> {
    let len = (a.seconds * a.sample_rate as f64).round() as usize;
    if len == 0 {
        bail!("--seconds gives an empty clip");
    }
    let paths = write_corpus(&a.out, a.clean, a.noise, len, a.sample_rate, a.seed)?;
    println!("wrote {} files to {}", paths.len(), a.out.display());
    Ok(())
}

fn train_codec(a: TrainCodecArgs) -> Result<()> {
    let mut t = match &a.resume {
        Some(p) => CodecTrainer::from_checkpoint(&Checkpoint::load(p)?, &a.cfg.overrides())?,
        None => CodecTrainer::new(&a.cfg.load()?)?,
    };
    let data = load_dataset(&a.data, &a.prefix, t.cfg.codec.sample_rate)?;
    let mut run = RunDir::create(&a.out)?;
    println!("codec: {} clips, starting at step {}", data.len(), t.step);
    t.run(&data, Some(&mut run), print_step)?;
    println!("done; last checkpoint {}", a.out.join("last.wldm").display());
    Ok(())
}

fn train_diffusion(a: TrainDiffusionArgs) -> Result<()> {
    let mut t = match (&a.resume, &a.codec) {
        (Some(p), _) => DiffusionTrainer::from_checkpoint(&Checkpoint::load(p)?, &a.cfg.overrides())?,
        (None, Some(c)) => {
            let cfg = a.cfg.load()?;
            let data = load_dataset(&a.data, &a.prefix, cfg.codec.sample_rate)?;
            DiffusionTrainer::new(&cfg, &Checkpoint::load(c)?, &data)?
        }
        (None, None) => bail!("train-diffusion needs a stage-1 checkpoint: pass --codec <path> (or --resume)"),
    };
    let sr = t.cfg.codec.sample_rate;
    let data = load_dataset(&a.data, &a.prefix, sr)?;
    let noise = a.noise.as_deref().map(|p| load_noise(p, sr)).transpose()?;
    let mut run = RunDir::create(&a.out)?;
    println!("diffusion: {} clips, latent scale {:.4}, starting at step {}", data.len(), t.latent_scale, t.step);
    t.run(&data, noise.as_deref(), Some(&mut run), print_step)?;
    println!("done; last checkpoint {}", a.out.join("last.wldm").display());
    Ok(())
}

fn restore_file(r: &Restorer, input: AudioClip, seed: u64) -> Result<AudioClip> {
    let sr_in = input.sample_rate;
    let x = to_rate(input, r.codec.cfg.sample_rate)?;
    let y = r.restore(&x, seed)?;
    let mut y = to_rate(y, sr_in)?;
    if sr_in != r.codec.cfg.sample_rate {
        // keep the exact input duration after the round trip
        let n = (x.len() as u64 * sr_in as u64 / r.codec.cfg.sample_rate as u64) as usize;
        y.samples.resize(n, 0.0);
    }
    Ok(y)
}

fn load_restorer(path: &Path) -> Result<Restorer> {
    let ck = Checkpoint::load(path)?;
    Restorer::from_checkpoint(&ck).with_context(|| format!("{} is not a stage-2 checkpoint", path.display()))
}

fn enhance(a: RestoreArgs) -> Result<()> {
    let r = load_restorer(&a.checkpoint)?;
    let input = load_wav(&a.input)?;
    let n = input.len();
    let mut y = restore_file(&r, input, a.seed)?;
    y.samples.resize(n, 0.0);
    save_wav(&y, &a.output)?;
    println!("wrote {} ({} samples)", a.output.display(), y.len());
    Ok(())
}

fn parse_mask(spec: &str, sample_rate: u32) -> Result<(usize, usize)> {
    let (s, l) = spec.split_once(':').context("--mask expects START_MS:LEN_MS")?;
    let ms = |v: &str| -> Result<usize> {
        let f: f64 = v.trim().parse().with_context(|| format!("bad millisecond value {v:?}"))?;
        if !(f >= 0.0) {
            bail!("mask times must be non-negative, got {f}");
        }
        Ok((f * sample_rate as f64 / 1000.0).round() as usize)
    };
    Ok((ms(s)?, ms(l)?))
}

fn inpaint(a: InpaintArgs) -> Result<()> {
    let r = load_restorer(&a.io.checkpoint)?;
    let mut input = load_wav(&a.io.input)?;
    if let Some(m) = &a.mask {
        let (start, len) = parse_mask(m, input.sample_rate)?;
        if start + len > input.len() {
            bail!("mask {m} ends past the clip ({} samples)", input.len());
        }
        input.samples[start..start + len].fill(0.0);
        if let Some(p) = &a.save_masked {
            save_wav(&input, p)?;
        }
    }
    let n = input.len();
    let mut y = restore_file(&r, input, a.io.seed)?;
    y.samples.resize(n, 0.0);
    save_wav(&y, &a.io.output)?;
    println!("wrote {}", a.io.output.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let refs = list_wavs(&a.reference)?;
    if refs.is_empty() {
        bail!("no WAV files in {}", a.reference.display());
    }
    let mut clips = Vec::new();
    for p in &refs {
        let name = p.file_name().context("reference without file name")?;
        let e = a.estimate.join(name);
        if !e.exists() {
            bail!("missing estimate {}", e.display());
        }
        let x = load_wav(p)?;
        let y = to_rate(load_wav(&e)?, x.sample_rate)?;
        if x.len() != y.len() {
            bail!("{}: {} reference samples but {} estimate samples", name.to_string_lossy(), x.len(), y.len());
        }
        clips.push((name.to_string_lossy().into_owned(), x, y));
    }
    let sr = clips[0].1.sample_rate;
    if let Some((n, _, _)) = clips.iter().find(|c| c.1.sample_rate != sr) {
        bail!("{n}: reference sample rates differ");
    }
    let pairs: Vec<EvalPair<'_>> = clips
        .iter()
        .map(|(n, x, y)| EvalPair { path: n.clone(), reference: &x.samples, estimate: &y.samples })
        .collect();
    let report = evaluate_set(&pairs, sr, &LsdConfig::default(), &StoiConfig::default())?;
    report.save(&a.report)?;
    for f in &report.files {
        println!("{:<32} lsd {:.4}  stoi {:.4}", f.path, f.lsd, f.stoi);
    }
    println!("mean over {}: lsd {:.4}  stoi {:.4}", report.summary.count, report.summary.lsd, report.summary.stoi);
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if let Ok(stage) = checkpoint_stage(&ck) {
        println!("stage {stage:?}, step {}", ck.get_u64("meta.step")?);
    }
    let mut total = 0usize;
    for (name, e) in ck.entries() {
        println!("{name:<48} {:?}", e.shape);
        if !name.starts_with("meta.") && !name.starts_with("opt") {
            total += e.data.len();
        }
    }
    println!("{} entries, {total} model parameters", ck.len());
    if a.config {
        println!("\n{}", ck.get_str("meta.config")?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::MakeCorpus(a) => make_corpus(a),
        Command::TrainCodec(a) => train_codec(a),
        Command::TrainDiffusion(a) => train_diffusion(a),
        Command::Enhance(a) => enhance(a),
        Command::Inpaint(a) => inpaint(a),
        Command::Evaluate(a) => evaluate(a),
        Command::InspectCheckpoint(a) => inspect(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
