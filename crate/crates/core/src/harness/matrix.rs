//! The full method matrix: weight-only and W4A4 rows for every method.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::{nll_eval, Checkpoint};
use crate::posthoc::{awq_sweep, collect_calib_stats, quarot_full, quarot_per_linear, smoothquant_sweep};
use crate::quant::{Grouping, QuantPlan};

use super::config::ExperimentSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    WeightOnly,
    W4A4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub method: &'static str,
    pub family: &'static str,
    pub precision: Precision,
    pub checkpoint: String,
    pub nll: f64,
    pub ppl: f64,
    /// Hyperparameter chosen on the calibration split, if the method sweeps.
    pub selected: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodMatrixReport {
    pub rows: Vec<MatrixRow>,
}

pub const METHODS: [&str; 12] = [
    "FP16",
    "RTN W8",
    "RTN W4 (g128)",
    "RTN W4 (per-channel)",
    "SmoothQuant W4",
    "AWQ W4",
    "QuaRot W4",
    "RTN W4A4",
    "SmoothQuant W4A4",
    "AWQ W4A4",
    "QuaRot per-linear W4A4",
    "QuaRot full W4A4",
];

/// Evaluates all twelve rows for one checkpoint. Every cell is a single
/// deterministic evaluation on `eval`; sweeps select on `calib`.
pub fn method_matrix(
    ckpt: &Checkpoint,
    name: &str,
    calib: &[Vec<u32>],
    eval: &[Vec<u32>],
    spec: &ExperimentSpec,
) -> Result<Vec<MatrixRow>> {
    let wspec = spec.quant.weight();
    let w_only = QuantPlan {
        weight: Some(wspec),
        act: None,
        skip: Vec::new(),
        transforms: Vec::new(),
    };
    let w4a4 = QuantPlan {
        weight: Some(wspec),
        act: Some(spec.quant.act()),
        skip: Vec::new(),
        transforms: Vec::new(),
    };
    let w8 = QuantPlan::weight_only(8, wspec.grouping);
    let per_channel = QuantPlan::weight_only(wspec.bits, Grouping::PerChannel);

    let stats = collect_calib_stats(ckpt, calib)?;
    let mut rows = Vec::new();
    let mut push = |method: &'static str, family: &'static str, precision, nll: f64, selected: String| {
        rows.push(MatrixRow {
            method,
            family,
            precision,
            checkpoint: name.to_string(),
            nll,
            ppl: nll.exp(),
            selected,
        });
    };
    let sq = &spec.smoothquant;
    let aw = &spec.awq;
    let per_linear = quarot_per_linear(ckpt, spec.quarot.seed)?.install(ckpt)?;

    push("FP16", "fp", Precision::WeightOnly, nll_eval(eval, ckpt, None)?, String::new());
    push("RTN W8", "rtn8", Precision::WeightOnly, nll_eval(eval, ckpt, Some(&w8))?, String::new());
    push("RTN W4 (g128)", "rtn", Precision::WeightOnly, nll_eval(eval, ckpt, Some(&w_only))?, String::new());
    push(
        "RTN W4 (per-channel)",
        "rtn_pc",
        Precision::WeightOnly,
        nll_eval(eval, ckpt, Some(&per_channel))?,
        String::new(),
    );
    let s = smoothquant_sweep(ckpt, &stats, &sq.alphas, sq.include_generators, &w_only, calib)?;
    push(
        "SmoothQuant W4",
        "smoothquant",
        Precision::WeightOnly,
        s.selected.nll(&w_only, eval)?,
        format!("alpha={}", s.selected_alpha),
    );
    let a = awq_sweep(ckpt, &stats, &aw.fractions, &aw.factors, &w_only, calib)?;
    push(
        "AWQ W4",
        "awq",
        Precision::WeightOnly,
        a.selected.nll(&w_only, eval)?,
        format!("fraction={} factor={}", a.selected_fraction, a.selected_factor),
    );
    push("QuaRot W4", "quarot", Precision::WeightOnly, per_linear.nll(&w_only, eval)?, String::new());

    push("RTN W4A4", "rtn", Precision::W4A4, nll_eval(eval, ckpt, Some(&w4a4))?, String::new());
    let s = smoothquant_sweep(ckpt, &stats, &sq.alphas, sq.include_generators, &w4a4, calib)?;
    push(
        "SmoothQuant W4A4",
        "smoothquant",
        Precision::W4A4,
        s.selected.nll(&w4a4, eval)?,
        format!("alpha={}", s.selected_alpha),
    );
    let a = awq_sweep(ckpt, &stats, &aw.fractions, &aw.factors, &w4a4, calib)?;
    push(
        "AWQ W4A4",
        "awq",
        Precision::W4A4,
        a.selected.nll(&w4a4, eval)?,
        format!("fraction={} factor={}", a.selected_fraction, a.selected_factor),
    );
    push(
        "QuaRot per-linear W4A4",
        "quarot",
        Precision::W4A4,
        per_linear.nll(&w4a4, eval)?,
        String::new(),
    );
    let full = quarot_full(ckpt, spec.quarot.seed)?.install()?;
    push("QuaRot full W4A4", "quarot_full", Precision::W4A4, full.nll(&w4a4, eval)?, String::new());
    Ok(rows)
}

impl MethodMatrixReport {
    /// `method,checkpoint,nll,ppl,selected`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,checkpoint,nll,ppl,selected\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:?},{:?},{}", r.method, r.checkpoint, r.nll, r.ppl, r.selected);
        }
        out
    }

    /// Pairs (family, checkpoint) where the weight-only cell is worse than
    /// the W4A4 cell of the same method.
    pub fn w_only_violations(&self) -> Vec<(String, String)> {
        let mut bad = Vec::new();
        for w in self.rows.iter().filter(|r| r.precision == Precision::WeightOnly) {
            if let Some(a) = self
                .rows
                .iter()
                .find(|r| r.precision == Precision::W4A4 && r.family == w.family && r.checkpoint == w.checkpoint)
            {
                if w.nll > a.nll {
                    bad.push((w.family.to_string(), w.checkpoint.clone()));
                }
            }
        }
        bad
    }

    /// PPL table with one column per checkpoint.
    pub fn to_text(&self) -> String {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.checkpoint.as_str()) {
                names.push(&r.checkpoint);
            }
        }
        let mut out = format!("{:<24}", "method");
        for n in &names {
            let _ = write!(out, " {n:>14}");
        }
        out.push('\n');
        for m in METHODS {
            let _ = write!(out, "{m:<24}");
            for n in &names {
                match self.rows.iter().find(|r| r.method == m && r.checkpoint == *n) {
                    Some(r) => {
                        let _ = write!(out, " {:>14.3}", r.ppl);
                    }
                    None => {
                        let _ = write!(out, " {:>14}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}
