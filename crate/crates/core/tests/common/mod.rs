#![allow(dead_code)]

use std::path::{Path, PathBuf};

use sqlab_core::data::synthetic_text;
use sqlab_core::model::Checkpoint;
use sqlab_core::train::{train, TrainConfig};

/// Short training run on synthetic text; enough to give the weights
/// structure without taking more than a few seconds.
pub fn trained(cfg: &TrainConfig) -> Checkpoint {
    let corpus = synthetic_text(cfg.seed ^ 0xC0, (20 * cfg.batch_tokens).max(64 * 1024));
    train(cfg, &corpus, |_| {}).unwrap().checkpoint
}

pub fn short_smoke(steps: usize, k: usize) -> TrainConfig {
    let mut cfg = TrainConfig::smoke();
    cfg.steps = steps;
    cfg.warmup_tokens = (steps * cfg.batch_tokens / 10) as u64;
    cfg.model.k_registers = k;
    cfg.sink_enabled = false;
    cfg
}

/// Writes the checkpoints plus disjoint calibration and evaluation texts and
/// an experiment spec referencing them; returns the spec path.
pub fn write_experiment(dir: &Path, ckpts: &[(&str, &Checkpoint)], chunks: usize, extra: &str) -> PathBuf {
    std::fs::write(dir.join("calib.txt"), synthetic_text(101, 64 * chunks)).unwrap();
    std::fs::write(dir.join("eval.txt"), synthetic_text(202, 64 * chunks)).unwrap();
    let mut names = Vec::new();
    for (name, ckpt) in ckpts {
        ckpt.save(&dir.join(format!("{name}.sqlab"))).unwrap();
        names.push(format!("\"{name}.sqlab\""));
    }
    let spec = format!(
        "checkpoints = [{}]\noutput_dir = \"out\"\n[data]\neval = \"eval.txt\"\ncalib = \"calib.txt\"\nchunk_len = 64\n{extra}\n",
        names.join(", ")
    );
    let path = dir.join("experiment.toml");
    std::fs::write(&path, spec).unwrap();
    path
}
