//! Salient-channel protective scaling ranked by activation L2 importance.

use serde_json::json;

use super::smoothquant::SweepPoint;
use super::stats::CalibStats;
use super::{scale_input_columns, FoldedModel};
use crate::error::{LabError, Result};
use crate::model::{Checkpoint, FoldRecord, SiteId};
use crate::quant::{QuantPlan, SiteTransform, Transform};

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.01, 0.02, 0.05, 0.1];
pub const DEFAULT_FACTORS: [f64; 2] = [2.0, 4.0];

/// Number of protected channels out of `n`.
pub fn protected_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(LabError::usage(format!("salient fraction must lie in (0, 1], got {fraction}")));
    }
    let c = (fraction * n as f64).round() as usize;
    if c == 0 {
        return Err(LabError::usage(format!(
            "salient fraction {fraction} of {n} channels rounds to zero channels"
        )));
    }
    Ok(c.min(n))
}

/// Scales the weight columns of the `fraction` most important input
/// channels of every site by `factor` and divides those inputs at runtime.
pub fn awq_scale(ckpt: &Checkpoint, stats: &CalibStats, fraction: f64, factor: f64) -> Result<FoldedModel> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(LabError::usage(format!("protect factor must be positive, got {factor}")));
    }
    let cfg = &ckpt.config;
    let mut params = ckpt.to_params()?;
    let mut transforms = Vec::new();
    let mut protected = serde_json::Map::new();
    for site in SiteId::all(cfg.n_layers) {
        let importance = stats.site(site)?.l2_mean();
        let n = importance.len();
        let c = protected_count(n, fraction)?;
        let mut order: Vec<usize> = (0..n).collect();
        // Descending importance; index breaks ties so the choice is stable.
        order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
        let mut scales = vec![1.0; n];
        for &j in &order[..c] {
            scales[j] = factor;
        }
        scale_input_columns(&mut params, site, &scales);
        let mut chosen = order[..c].to_vec();
        chosen.sort_unstable();
        protected.insert(site.to_string(), json!(chosen));
        transforms.push(SiteTransform {
            site,
            transform: Transform::InputScale { divisor: scales },
        });
    }
    let mut out = ckpt.with_params(&params);
    out.folds.push(FoldRecord {
        method: "awq".into(),
        detail: json!({ "fraction": fraction, "factor": factor, "protected": protected }),
    });
    Ok(FoldedModel {
        checkpoint: out,
        transforms,
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone)]
pub struct AwqSweep {
    /// One point per (factor, fraction); `param` holds the fraction.
    pub points: Vec<(f64, SweepPoint)>,
    pub selected_fraction: f64,
    pub selected_factor: f64,
    pub selected: FoldedModel,
}

/// Joint sweep over protect factors and salient fractions, selected by
/// calibration NLL under `base`.
pub fn awq_sweep(
    ckpt: &Checkpoint,
    stats: &CalibStats,
    fractions: &[f64],
    factors: &[f64],
    base: &QuantPlan,
    calib: &[Vec<u32>],
) -> Result<AwqSweep> {
    if fractions.is_empty() || factors.is_empty() {
        return Err(LabError::usage("AWQ sweep grid is empty"));
    }
    let mut points = Vec::new();
    let mut best: Option<(f64, f64, f64, FoldedModel)> = None;
    for &factor in factors {
        for &fraction in fractions {
            let folded = awq_scale(ckpt, stats, fraction, factor)?;
            let nll = folded.nll(base, calib)?;
            points.push((factor, SweepPoint { param: fraction, calib_nll: nll }));
            if best.as_ref().is_none_or(|b| nll < b.2) {
                best = Some((fraction, factor, nll, folded));
            }
        }
    }
    let (selected_fraction, selected_factor, _, selected) = best.expect("non-empty sweep");
    Ok(AwqSweep {
        points,
        selected_fraction,
        selected_factor,
        selected,
    })
}
