use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml");

fn lldm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lldm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lldm(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Trained {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        ok(&["make-corpus", "--out", s(&data), "--clean", "3", "--noise", "1", "--seconds", "1", "--seed", "5"]);
        ok(&["train-codec", "--config", TINY, "--data", s(&data), "--out", s(&root.join("codec"))]);
        ok(&[
            "train-diffusion",
            "--config",
            TINY,
            "--data",
            s(&data),
            "--codec",
            s(&root.join("codec/last.wldm")),
            "--noise",
            s(&data.join("noise_000.wav")),
            "--out",
            s(&root.join("diff")),
        ]);
        Trained { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = lldm(&["enhance", "--bogus"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(!lldm(&[]).status.success());
}

#[test]
fn train_diffusion_without_codec_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = lldm(&["train-diffusion", "--data", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--codec"));
}

#[test]
fn end_to_end_workflow() {
    let t = Trained::new();

    let listing = ok(&["inspect-checkpoint", s(&t.path("diff/last.wldm"))]);
    assert!(listing.contains("Diffusion"), "{listing}");
    assert!(listing.lines().any(|l| l.starts_with("unet.") && l.trim_end().ends_with(']')), "{listing}");
    assert!(listing.contains("model parameters"));
    assert!(ok(&["inspect-checkpoint", s(&t.path("codec/last.wldm")), "--config"]).contains("[codec"));

    let clean = t.path("data/clean_000.wav");
    assert!(clean.exists());
    let outdir = t.path("est");
    std::fs::create_dir(&outdir).unwrap();
    let est = outdir.join("clean_000.wav");
    ok(&["enhance", "--checkpoint", s(&t.path("diff/last.wldm")), "--input", s(&clean), "--output", s(&est)]);
    let frames = |p: &Path| hound::WavReader::open(p).unwrap().duration();
    assert_eq!(frames(&est), frames(&clean));

    let filled = t.path("filled.wav");
    ok(&[
        "inpaint",
        "--checkpoint",
        s(&t.path("diff/last.wldm")),
        "--input",
        s(&clean),
        "--output",
        s(&filled),
        "--mask",
        "400:100",
    ]);
    assert_eq!(frames(&filled), frames(&clean));
    let codec_only = lldm(&["enhance", "--checkpoint", s(&t.path("codec/last.wldm")), "--input", s(&clean), "--output", s(&filled)]);
    assert!(!codec_only.status.success());

    let refs = t.path("refs");
    std::fs::create_dir(&refs).unwrap();
    std::fs::copy(&clean, refs.join("clean_000.wav")).unwrap();
    let report = t.path("report.jsonl");
    let printed = ok(&["evaluate", "--reference", s(&refs), "--estimate", s(&outdir), "--report", s(&report)]);
    assert!(printed.contains("mean over 1"));
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.contains("\"clean_000.wav\"") && text.contains("\"summary\""));
}
