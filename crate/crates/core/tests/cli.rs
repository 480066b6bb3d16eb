use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sqlab_core::data::synthetic_text;
use sqlab_core::model::{Checkpoint, ModelConfig};
use sqlab_core::train::TrainConfig;

fn sqlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqlab")).args(args).output().unwrap()
}

fn write_train_spec(dir: &Path, corpus: &str, steps: usize) -> PathBuf {
    let mut cfg = TrainConfig::smoke();
    cfg.steps = steps;
    let spec = format!(
        "corpus = \"{corpus}\"\noutput_dir = \"out\"\nname = \"smoke\"\n\n[train]\n{}",
        toml::to_string(&cfg).unwrap().replace("[model]", "[train.model]")
    );
    let path = dir.join("train.toml");
    std::fs::write(&path, spec).unwrap();
    path
}

#[test]
fn init_inspect_verify_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("init.sqlab");
    let ck = ck.to_str().unwrap();
    let out = sqlab(&["init", ck, "--k", "4", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = sqlab(&["inspect", ck]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("k_registers"));
    let out = sqlab(&["verify", ck]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn missing_corpus_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_train_spec(dir.path(), "no_such_corpus.txt", 10);
    let out = sqlab(&["train", spec.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_corpus.txt"));
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.sqlab");
    Checkpoint::random_init(&ModelConfig::tiny(2), 1).unwrap().save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let out = sqlab(&["inspect", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
}

#[test]
fn nan_weight_fails_verification_naming_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nan.sqlab");
    let mut ckpt = Checkpoint::random_init(&ModelConfig::tiny(2), 1).unwrap();
    ckpt.tensors.get_mut("layers.1.w2").unwrap().data[5] = f32::NAN;
    std::fs::write(&path, ckpt.to_bytes()).unwrap();
    let out = sqlab(&["verify", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    let all = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    assert!(all.contains("layers.1.w2"), "{all}");
}

#[test]
fn smoke_training_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.txt"), synthetic_text(1, 64 * 1024)).unwrap();
    let spec = write_train_spec(dir.path(), "corpus.txt", 200);
    let out = sqlab(&["train", spec.to_str().unwrap(), "--seed", "77"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = std::fs::read_to_string(dir.path().join("out/smoke_loss.csv")).unwrap();
    let losses: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 200);
    assert!(losses.iter().all(|l| l.is_finite()));
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < head - 0.5, "loss did not fall: {head} -> {tail}");

    let ckpt = Checkpoint::load(&dir.path().join("out/smoke.sqlab")).unwrap();
    assert!(ckpt.provenance.contains("seed=77"), "{}", ckpt.provenance);
    assert!(dir.path().join("out/train.manifest.json").exists());
}
