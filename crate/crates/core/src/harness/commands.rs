//! Command implementations behind the CLI verbs. Each returns the text to
//! print; files go to the output directory named by the spec.

use std::path::Path;

use serde_json::json;

use super::config::{ExperimentSpec, TrainSpec};
use super::matrix::{method_matrix, MethodMatrixReport};
use super::output::OutputDir;
use super::verify::{render_table, verify_suite};
use crate::data::{load_corpus, load_split};
use crate::diagnostics::{budget_run, noise_sweep, tail_report};
use crate::error::{LabError, Result};
use crate::model::{capture_split, Checkpoint, PreparedModel};
use crate::posthoc::collect_calib_stats;
use crate::quant::QuantPlan;
use crate::train::{loss_trace_csv, train, trio_configs, trio_match};

pub fn checkpoint_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned())
}

fn load_checkpoints(spec: &ExperimentSpec, out: &mut OutputDir) -> Result<Vec<(String, Checkpoint)>> {
    let mut v = Vec::new();
    for p in &spec.checkpoints {
        let name = checkpoint_name(p);
        out.record_input(&format!("checkpoint:{name}"), p)?;
        v.push((name, Checkpoint::load(p)?));
    }
    let mut names: Vec<&String> = v.iter().map(|(n, _)| n).collect();
    names.sort();
    names.dedup();
    if names.len() != v.len() {
        return Err(LabError::config("checkpoint file names must have distinct stems"));
    }
    Ok(v)
}

fn record_data(spec: &ExperimentSpec, out: &mut OutputDir) -> Result<()> {
    out.record_input("eval", &spec.data.eval)?;
    out.record_input("calib", &spec.data.calib)?;
    out.record("spec", serde_json::to_value(spec).expect("spec serializes"));
    Ok(())
}

/// Trains one model (or the matched trio) as described by `spec`.
pub fn cmd_train(spec: &TrainSpec, mut log: impl FnMut(&str)) -> Result<String> {
    spec.validate()?;
    let corpus = load_corpus(&spec.corpus)?;
    let mut out = OutputDir::create(&spec.output_dir, "train")?;
    out.record_input("corpus", &spec.corpus)?;
    out.record("spec", serde_json::to_value(spec).expect("spec serializes"));
    out.record_seed("base", spec.train.seed.to_string());
    let runs: Vec<(String, crate::train::TrainConfig)> = if spec.trio {
        trio_configs(&spec.train, spec.train.model.k_registers)
            .into_iter()
            .map(|(n, c)| (format!("{}_{n}", spec.name), c))
            .collect()
    } else {
        vec![(spec.name.clone(), spec.train.clone())]
    };
    let mut summary = String::new();
    let mut trained = Vec::new();
    for (name, cfg) in &runs {
        let every = (cfg.steps / 20).max(1);
        let outcome = train(cfg, &corpus, |r| {
            if r.step % every == 0 || r.step + 1 == cfg.steps {
                log(&format!(
                    "{name} step {:>6} ce {:.4} sink {:.5} lr {:.2e} |g| {:.3}",
                    r.step, r.ce_loss, r.sink_loss, r.lr, r.grad_norm
                ));
            }
        })?;
        out.write(&format!("{name}_loss.csv"), loss_trace_csv(&outcome.trace).as_bytes())?;
        out.write(&format!("{name}.sqlab"), &outcome.checkpoint.to_bytes())?;
        let last = outcome.trace.last().expect("at least one step");
        summary.push_str(&format!(
            "{name}: {} steps, final ce {:.4}, provenance: {}\n",
            cfg.steps, last.ce_loss, outcome.checkpoint.provenance
        ));
        trained.push((name.clone(), outcome.checkpoint));
    }
    if let Some(eval_path) = &spec.eval {
        out.record_input("eval", eval_path)?;
        let chunk = spec.train.chunk_len();
        let eval = load_split(eval_path, chunk, spec.eval_max_chunks)?;
        let named: Vec<(String, &Checkpoint)> = trained.iter().map(|(n, c)| (n.clone(), c)).collect();
        let m = trio_match(&named, &eval, spec.trio_budget_nats)?;
        let mut csv = String::from("checkpoint,fp_nll\n");
        for (n, nll) in &m.nlls {
            csv.push_str(&format!("{n},{nll:?}\n"));
            summary.push_str(&format!("{n}: fp eval nll {nll:.5}\n"));
        }
        out.write("fp_eval.csv", csv.as_bytes())?;
        if spec.trio {
            out.record(
                "trio",
                json!({ "spread": m.spread, "budget": m.budget, "within_budget": m.within_budget }),
            );
            summary.push_str(&format!(
                "trio fp spread {:.5} nats (budget {}){}\n",
                m.spread,
                m.budget,
                if m.within_budget { "" } else { "  ** OVER BUDGET: capacity match not achieved **" }
            ));
        }
    }
    out.finish()?;
    Ok(summary)
}

pub fn cmd_matrix(spec: &ExperimentSpec) -> Result<(String, MethodMatrixReport)> {
    let mut out = OutputDir::create(&spec.output_dir, "matrix")?;
    record_data(spec, &mut out)?;
    out.record_seed("quarot", spec.quarot.seed.to_string());
    let ckpts = load_checkpoints(spec, &mut out)?;
    let mut rows = Vec::new();
    for (name, ckpt) in &ckpts {
        let (calib, eval) = spec.load_splits(ckpt.config.seq_len_max)?;
        rows.extend(method_matrix(ckpt, name, &calib, &eval, spec)?);
    }
    let report = MethodMatrixReport { rows };
    out.write("matrix.csv", report.to_csv().as_bytes())?;
    let mut text = report.to_text();
    let bad = report.w_only_violations();
    if bad.is_empty() {
        text.push_str("weight-only <= W4A4 for every method and checkpoint\n");
    } else {
        text.push_str(&format!("weight-only worse than W4A4 for: {bad:?}\n"));
    }
    out.record("w_only_violations", json!(bad));
    out.write("matrix.txt", text.as_bytes())?;
    out.finish()?;
    Ok((text, report))
}

pub fn cmd_budget(spec: &ExperimentSpec) -> Result<String> {
    let mut out = OutputDir::create(&spec.output_dir, "budget")?;
    record_data(spec, &mut out)?;
    let grid = spec.skip_grid()?;
    let base = QuantPlan {
        weight: Some(spec.quant.weight()),
        act: Some(spec.quant.act()),
        skip: Vec::new(),
        transforms: Vec::new(),
    };
    let mut text = String::new();
    for (name, ckpt) in load_checkpoints(spec, &mut out)? {
        let (_, eval) = spec.load_splits(ckpt.config.seq_len_max)?;
        let rep = budget_run(&ckpt, &eval, &grid, &base)?;
        if !rep.identities_hold() {
            return Err(LabError::Verification(format!("{name}: budget identities do not hold")));
        }
        out.write(&format!("{name}/budget.csv"), rep.to_csv().as_bytes())?;
        text.push_str(&format!("== {name}\n{}", rep.to_text()));
    }
    out.write("budget.txt", text.as_bytes())?;
    out.finish()?;
    Ok(text)
}

pub fn cmd_tails(spec: &ExperimentSpec) -> Result<String> {
    let mut out = OutputDir::create(&spec.output_dir, "tails")?;
    record_data(spec, &mut out)?;
    out.record_seed("capture", spec.tails.seed.to_string());
    let mut text = String::new();
    for (name, ckpt) in load_checkpoints(spec, &mut out)? {
        let (_, eval) = spec.load_splits(ckpt.config.seq_len_max)?;
        let model = PreparedModel::fp(&ckpt)?;
        let res = capture_split(&model, &eval, spec.tails.reservoir_cap, spec.tails.seed)?;
        let rep = tail_report(&res, ckpt.config.n_layers)?;
        out.write(&format!("{name}/tails.csv"), rep.to_csv().as_bytes())?;
        text.push_str(&format!("== {name}\n{}", rep.to_text()));
    }
    out.write("tails.txt", text.as_bytes())?;
    out.finish()?;
    Ok(text)
}

pub fn cmd_noise(spec: &ExperimentSpec) -> Result<String> {
    let mut out = OutputDir::create(&spec.output_dir, "noise")?;
    record_data(spec, &mut out)?;
    out.record_seed("noise", json!(spec.noise.seeds));
    let mut text = String::new();
    for (name, ckpt) in load_checkpoints(spec, &mut out)? {
        let (calib, eval) = spec.load_splits(ckpt.config.seq_len_max)?;
        let stats = collect_calib_stats(&ckpt, &calib)?;
        let rep = noise_sweep(&ckpt, &eval, &stats, &spec.noise.sites, &spec.noise.sigmas, &spec.noise.seeds)?;
        out.write(&format!("{name}/noise.csv"), rep.to_csv().as_bytes())?;
        text.push_str(&format!("== {name}\n{}", rep.to_text()));
        for &site in &spec.noise.sites {
            if !rep.monotone_within_2se(site) {
                text.push_str(&format!("{site}: loss increase not monotone within 2 SE\n"));
            }
        }
    }
    out.write("noise.txt", text.as_bytes())?;
    out.finish()?;
    Ok(text)
}

/// Runs the property suite; the error carries exit code 4 on any failure.
pub fn cmd_verify(path: &Path, seed: u64) -> Result<String> {
    let ckpt = Checkpoint::load_unvalidated(path)?;
    let outcomes = verify_suite(&ckpt, seed)?;
    let table = render_table(&outcomes);
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(LabError::Verification(format!("{failed} check(s) failed\n{table}")));
    }
    Ok(table)
}

pub fn cmd_inspect(path: &Path) -> Result<String> {
    Ok(Checkpoint::load_unvalidated(path)?.manifest_text())
}

/// Writes a freshly initialised checkpoint (handy for smoke tests).
pub fn cmd_init(config: &crate::model::ModelConfig, seed: u64, path: &Path) -> Result<String> {
    let ckpt = Checkpoint::random_init(config, seed)?;
    ckpt.save(path)?;
    Ok(format!("wrote {}\n", path.display()))
}
