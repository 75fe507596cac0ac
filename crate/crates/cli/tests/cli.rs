use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
image_size = 16
downsample = 4
patch = 4
tokens = 4
latent_dim = 16
vocab_size = 32
vocab_dim = 8
codebook_size = 16
model_width = 16
encoder_blocks = 1
decoder_blocks = 1
heads = 2
time_dim = 8
velocity_width = 32
velocity_blocks = 1
train_steps = 4
batch_size = 4
ar_steps = 2
ode_steps = 3
prior_width = 16
prior_blocks = 1
prior_heads = 2
prior_steps = 4
synth_count = 8
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vocabflow"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn vocabflow")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    ok(dir.path(), &["synth-data", "--config", "tiny.cfg", "--out", "data"]);
    dir
}

fn train(dir: &Path, out: &str) -> Vec<u8> {
    ok(
        dir,
        &[
            "train-tokenizer",
            "--config",
            "tiny.cfg",
            "--data",
            "data",
            "--out",
            out,
        ],
    );
    std::fs::read(dir.join(out).join("tokenizer.ckpt")).unwrap()
}

#[test]
fn synth_data_writes_images_and_labels() {
    let dir = setup();
    let labels = std::fs::read_to_string(dir.path().join("data/labels.txt")).unwrap();
    assert_eq!(labels.lines().count(), 8);
    assert!(labels.starts_with("img_00000.ppm 0\n"));
    assert!(dir.path().join("data/img_00007.ppm").exists());
}

#[test]
fn eval_of_identical_directories_is_perfect() {
    let dir = setup();
    let stdout = ok(
        dir.path(),
        &["eval", "--reference", "data", "--recon", "data", "--out", "m"],
    );
    assert!(stdout.contains("mean_psnr_db=99.000000"), "{stdout}");
    assert!(stdout.contains("mean_ssim=1.000000"), "{stdout}");
    let file = std::fs::read_to_string(dir.path().join("m/metrics.txt")).unwrap();
    assert!(stdout.contains(&file));
}

#[test]
fn training_is_byte_deterministic() {
    let dir = setup();
    assert_eq!(train(dir.path(), "a"), train(dir.path(), "b"));
}

#[test]
fn full_pipeline_runs() {
    let dir = setup();
    train(dir.path(), "ck");
    let p = dir.path();
    let rec = ok(
        p,
        &[
            "reconstruct",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "ck/tokenizer.ckpt",
            "--input",
            "data",
            "--out",
            "rec",
        ],
    );
    assert_eq!(rec.lines().filter(|l| l.starts_with("image=")).count(), 8);
    let metrics = ok(p, &["eval", "--reference", "data", "--recon", "rec"]);
    assert!(metrics.contains("count=8"));

    ok(
        p,
        &[
            "train-prior",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "ck/tokenizer.ckpt",
            "--data",
            "data",
            "--out",
            "ck",
        ],
    );
    let generate = |out: &str, seed: &str| {
        ok(
            p,
            &[
                "generate",
                "--config",
                "tiny.cfg",
                "--checkpoint",
                "ck/tokenizer.ckpt",
                "--prior",
                "ck/prior.ckpt",
                "--class",
                "2",
                "--count",
                "2",
                "--seed",
                seed,
                "--temperature",
                "0",
                "--out",
                out,
            ],
        );
        std::fs::read(p.join(out).join("gen_c2_000.ppm")).unwrap()
    };
    assert_eq!(generate("g1", "0"), generate("g2", "0"));
    assert!(p.join("g1/gen_c2_001.ppm").exists());
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["synth-data", "--out", "x", "--no-such-key", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.lines().next().unwrap().starts_with("error kind=usage"));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn corrupted_checkpoint_fails_without_output() {
    let dir = setup();
    let mut bytes = train(dir.path(), "ck");
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(dir.path().join("bad.ckpt"), bytes).unwrap();
    let out = run(
        dir.path(),
        &[
            "reconstruct",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "bad.ckpt",
            "--input",
            "data",
            "--out",
            "rec",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error kind=crc"));
    assert!(!dir.path().join("rec").exists());
}

#[test]
fn architecture_mismatch_is_reported() {
    let dir = setup();
    train(dir.path(), "ck");
    let out = run(
        dir.path(),
        &[
            "reconstruct",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "ck/tokenizer.ckpt",
            "--input",
            "data",
            "--out",
            "rec",
            "--tokens",
            "2",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error kind=arch_mismatch"));
}
