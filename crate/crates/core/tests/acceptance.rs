//! One PASS/FAIL line per acceptance criterion.
//!
//! Criterion 7 needs checkpoints from a full desk-scale trio run, which takes
//! hours. Point `SQLAB_DESK_CKPT_DIR` at a directory holding
//! `desk_k0.sqlab`, `desk_k8.sqlab` and `desk_k8_sink.sqlab` and
//! `SQLAB_DESK_EVAL` at the held-out text to assert it; otherwise a
//! reduced-scale replication is run and reported without being asserted.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use sqlab_core::data::{load_split, synthetic_text};
use sqlab_core::diagnostics::{budget_run, default_grid};
use sqlab_core::harness::verify::{
    check_aggregate_bound, check_budget, check_fold_invariance, check_fourth_moment, check_gradients,
    check_norm_bound, check_quantizers, check_tail_statistics, probe_split,
};
use sqlab_core::harness::{cmd_matrix, CheckOutcome, ExperimentSpec};
use sqlab_core::model::{Checkpoint, ModelConfig, PreparedModel};
use sqlab_core::posthoc::quarot_per_linear;
use sqlab_core::quant::QuantPlan;
use sqlab_core::train::{train, trio_configs, trio_match, TrainConfig};
use sqlab_core::Result;

const SEED: u64 = 20240;

struct Line {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn run(id: &'static str, limit_s: f64, f: impl FnOnce() -> Result<(bool, String)>) -> Line {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let in_time = secs < limit_s;
    let line = Line {
        id,
        passed: passed && in_time,
        detail: format!("{detail}; {secs:.1}s (limit {limit_s:.0}s{})", if in_time { "" } else { ", EXCEEDED" }),
    };
    println!("{} {:<28} {}", if line.passed { "PASS" } else { "FAIL" }, line.id, line.detail);
    line
}

fn summarize(outcomes: &[CheckOutcome]) -> (bool, String) {
    let passed = outcomes.iter().all(|o| o.passed);
    let detail = outcomes
        .iter()
        .map(|o| format!("{}{}: {}", if o.passed { "" } else { "!" }, o.name, o.detail))
        .collect::<Vec<_>>()
        .join(" | ");
    (passed, detail)
}

/// Desk-shaped checkpoint with a few optimizer steps behind it.
fn desk_checkpoint(k: usize) -> Checkpoint {
    let mut cfg = TrainConfig::desk_full();
    cfg.model.k_registers = k;
    cfg.steps = 24;
    cfg.batch_tokens = 1024;
    cfg.warmup_tokens = 4096;
    cfg.sink_enabled = k > 0;
    common::trained(&cfg)
}

struct Directional {
    lines: Vec<(&'static str, bool, String)>,
}

/// The four directional checks of criterion 7 on a trio plus splits.
fn directional(trio: &[(String, Checkpoint)], eval: &[Vec<u32>], seed: u64) -> Result<Directional> {
    let k0 = &trio[0].1;
    let naive = QuantPlan::w4a4();
    let report = budget_run(k0, eval, &default_grid(), &naive)?;
    let fp = report.fp_nll;
    let naive_delta = report.naive_delta;
    let readers = report.row("skip_readers").expect("default grid has skip_readers").delta_nll;
    let rotated = quarot_per_linear(k0, seed)?.install(k0)?.nll(&naive, eval)?;
    let rtn = PreparedModel::new(k0, Some(&naive))?.nll(eval)?;
    let named: Vec<(String, &Checkpoint)> = trio.iter().map(|(n, c)| (n.clone(), c)).collect();
    let m = trio_match(&named, eval, 0.02)?;
    let nlls = m.nlls.iter().map(|(n, v)| format!("{n}={v:.4}")).collect::<Vec<_>>().join(" ");
    Ok(Directional {
        lines: vec![
            ("7a naive excess >= 0.1", naive_delta >= 0.1, format!("fp {fp:.4}, naive excess {naive_delta:.4} nats")),
            (
                "7b readers rescue",
                readers < naive_delta,
                format!("skip-readers excess {readers:.4} vs naive {naive_delta:.4}"),
            ),
            ("7c per-linear QuaRot", rotated < rtn, format!("QuaRot W4A4 {rotated:.4} vs RTN W4A4 {rtn:.4}")),
            (
                "7d trio spread reported",
                true,
                format!(
                    "{nlls}; spread {:.4} vs budget {} ({})",
                    m.spread,
                    m.budget,
                    if m.within_budget { "within" } else { "OVER" }
                ),
            ),
        ],
    })
}

fn desk_trio_from_env() -> Option<(Vec<(String, Checkpoint)>, Vec<Vec<u32>>)> {
    let dir = PathBuf::from(std::env::var_os("SQLAB_DESK_CKPT_DIR")?);
    let eval_path = PathBuf::from(std::env::var_os("SQLAB_DESK_EVAL")?);
    let chunks = std::env::var("SQLAB_DESK_EVAL_CHUNKS").ok().and_then(|s| s.parse().ok()).unwrap_or(256);
    let trio: Vec<(String, Checkpoint)> = ["desk_k0", "desk_k8", "desk_k8_sink"]
        .iter()
        .map(|n| (n.to_string(), Checkpoint::load(&dir.join(format!("{n}.sqlab"))).expect("desk checkpoint loads")))
        .collect();
    let eval = load_split(&eval_path, trio[0].1.config.seq_len_max, Some(chunks)).expect("desk eval split");
    Some((trio, eval))
}

fn reduced_trio() -> Result<(Vec<(String, Checkpoint)>, Vec<Vec<u32>>)> {
    let mut base = TrainConfig::smoke();
    base.steps = 150;
    let corpus = synthetic_text(SEED, 10 * 64 * 1024);
    let mut trio = Vec::new();
    for (name, cfg) in trio_configs(&base, base.model.k_registers) {
        trio.push((name, train(&cfg, &corpus, |_| {})?.checkpoint));
    }
    let eval = probe_split(&trio[0].1.config, 32, 64, SEED + 1);
    Ok((trio, eval))
}

fn main() -> ExitCode {
    let mut lines = Vec::new();

    lines.push(run("1 quantizer suite", 60.0, || Ok(summarize(&check_quantizers(10_000, SEED)))));

    let desk = desk_checkpoint(8);
    let desk_split = probe_split(&desk.config, 16, 64, SEED);
    let (calib, eval) = desk_split.split_at(8);

    lines.push(run("2 fold exactness", 300.0, || {
        Ok(summarize(&check_fold_invariance(&desk, calib, eval, SEED)?))
    }));

    lines.push(run("3 identity checks", 60.0, || {
        Ok(summarize(&[
            check_fourth_moment(1_000, SEED)?,
            check_norm_bound(1_000, SEED)?,
            check_aggregate_bound(1_000, SEED)?,
        ]))
    }));

    lines.push(run("4 statistic calibration", 60.0, || Ok(summarize(&check_tail_statistics(SEED)?))));

    lines.push(run("5 budget arithmetic", 600.0, || {
        let plain = Checkpoint::random_init(&ModelConfig { k_registers: 0, ..ModelConfig::default() }, SEED)?;
        Ok(summarize(&[check_budget(&desk, eval)?, check_budget(&plain, eval)?]))
    }));

    lines.push(run("6 gradient correctness", 120.0, || Ok(summarize(&[check_gradients(SEED)?]))));

    match desk_trio_from_env() {
        Some((trio, eval)) => {
            let t = Instant::now();
            match directional(&trio, &eval, SEED) {
                Ok(d) => {
                    for (id, passed, detail) in d.lines {
                        println!("{} {:<28} {detail}", if passed { "PASS" } else { "FAIL" }, id);
                        lines.push(Line { id: "7 directional", passed, detail });
                    }
                }
                Err(e) => {
                    println!("FAIL {:<28} error: {e}", "7 directional");
                    lines.push(Line { id: "7 directional", passed: false, detail: e.to_string() });
                }
            }
            println!("     criterion 7 evaluated in {:.1}s", t.elapsed().as_secs_f64());
        }
        None => {
            println!(
                "NOT RUN {:<25} needs a full desk trio (SQLAB_DESK_CKPT_DIR, SQLAB_DESK_EVAL); reduced-scale replication:",
                "7 directional"
            );
            match reduced_trio().and_then(|(trio, eval)| directional(&trio, &eval, SEED)) {
                Ok(d) => {
                    for (id, passed, detail) in d.lines {
                        println!("     reduced {:<24} {} {detail}", id, if passed { "holds" } else { "does not hold" });
                    }
                }
                Err(e) => println!("     reduced run failed: {e}"),
            }
        }
    }

    lines.push(run("8 matrix determinism", 600.0, || {
        let dir = tempfile::tempdir().map_err(|e| sqlab_core::LabError::io(std::path::Path::new("tmp"), e))?;
        let path = common::write_experiment(dir.path(), &[("desk", &desk)], 8, "");
        let spec = ExperimentSpec::load(&path)?;
        cmd_matrix(&spec)?;
        let first = std::fs::read(dir.path().join("out/matrix.csv")).expect("matrix.csv written");
        cmd_matrix(&spec)?;
        let second = std::fs::read(dir.path().join("out/matrix.csv")).expect("matrix.csv written");
        Ok((first == second, format!("{} bytes, identical: {}", first.len(), first == second)))
    }));

    let failed: Vec<_> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    if failed.is_empty() {
        println!("acceptance: all asserted criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}
