//! SmoothQuant-style scale migration from activations into weights.

use serde_json::json;

use super::stats::CalibStats;
use super::{scale_input_columns, FoldedModel};
use crate::error::{LabError, Result};
use crate::model::{Checkpoint, FoldRecord, SiteId, SiteKind};
use crate::quant::{QuantPlan, SiteTransform, Transform};

pub const SCALE_FLOOR: f64 = 1e-4;
pub const SCALE_CEIL: f64 = 1e4;
pub const DEFAULT_ALPHAS: [f64; 4] = [0.3, 0.5, 0.7, 0.8];

/// `s = max|X|^alpha / max|W|^(1 - alpha)`, clamped to the floor range.
/// Returns the scale and whether a degenerate (zero) statistic was hit.
pub fn smooth_scale(x_max: f64, w_max: f64, alpha: f64) -> (f64, bool) {
    let degenerate = x_max == 0.0 || w_max == 0.0;
    let raw = x_max.powf(alpha) / w_max.powf(1.0 - alpha);
    let s = if raw.is_nan() { 1.0 } else { raw.clamp(SCALE_FLOOR, SCALE_CEIL) };
    (s, degenerate || s != raw)
}

/// Folds per-channel smoothing scales into the weights of the chosen sites
/// (readers only unless `include_generators`), returning the divide
/// transforms that keep the full-precision function unchanged.
pub fn smoothquant_fold(
    ckpt: &Checkpoint,
    stats: &CalibStats,
    alpha: f64,
    include_generators: bool,
) -> Result<FoldedModel> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LabError::usage(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let cfg = &ckpt.config;
    let mut params = ckpt.to_params()?;
    let mut transforms = Vec::new();
    let mut warnings = Vec::new();
    let mut sites_done = Vec::new();
    for site in SiteId::all(cfg.n_layers) {
        if site.kind() == SiteKind::Generator && !include_generators {
            continue;
        }
        let st = stats.site(site)?;
        let w = params.layers[site.layer].weight(site.linear);
        if st.dim() != w.ncols() {
            return Err(LabError::usage(format!("calibration stats for {site} have the wrong width")));
        }
        let mut floored = 0usize;
        let scales: Vec<f64> = (0..w.ncols())
            .map(|j| {
                let w_max = w.column(j).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let (s, hit) = smooth_scale(st.abs_max[j], w_max, alpha);
                floored += hit as usize;
                s
            })
            .collect();
        if floored > 0 {
            warnings.push(format!("{site}: {floored} channel scale(s) clamped or degenerate"));
        }
        scale_input_columns(&mut params, site, &scales);
        transforms.push(SiteTransform {
            site,
            transform: Transform::InputScale { divisor: scales },
        });
        sites_done.push(site.to_string());
    }
    let mut out = ckpt.with_params(&params);
    out.folds.push(FoldRecord {
        method: "smoothquant".into(),
        detail: json!({ "alpha": alpha, "sites": sites_done, "warnings": warnings }),
    });
    Ok(FoldedModel {
        checkpoint: out,
        transforms,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub param: f64,
    pub calib_nll: f64,
}

#[derive(Debug, Clone)]
pub struct SmoothQuantSweep {
    pub points: Vec<SweepPoint>,
    pub selected_alpha: f64,
    pub selected: FoldedModel,
}

/// Tries every alpha under `base` (normally W4A4) and keeps the one with the
/// lowest calibration NLL; ties go to the earlier alpha.
pub fn smoothquant_sweep(
    ckpt: &Checkpoint,
    stats: &CalibStats,
    alphas: &[f64],
    include_generators: bool,
    base: &QuantPlan,
    calib: &[Vec<u32>],
) -> Result<SmoothQuantSweep> {
    if alphas.is_empty() {
        return Err(LabError::usage("alpha sweep is empty"));
    }
    let mut points = Vec::new();
    let mut best: Option<(f64, f64, FoldedModel)> = None;
    for &alpha in alphas {
        let folded = smoothquant_fold(ckpt, stats, alpha, include_generators)?;
        let nll = folded.nll(base, calib)?;
        points.push(SweepPoint { param: alpha, calib_nll: nll });
        if best.as_ref().is_none_or(|b| nll < b.1) {
            best = Some((alpha, nll, folded));
        }
    }
    let (selected_alpha, _, selected) = best.expect("non-empty sweep");
    Ok(SmoothQuantSweep {
        points,
        selected_alpha,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PreparedModel};
    use crate::posthoc::stats::collect_calib_stats;

    #[test]
    fn hand_scale() {
        assert_eq!(smooth_scale(8.0, 2.0, 0.5), (2.0, false));
        assert_eq!(smooth_scale(0.0, 2.0, 0.5).0, SCALE_FLOOR);
        assert_eq!(smooth_scale(3.0, 0.0, 0.5).0, SCALE_CEIL);
    }

    fn split() -> Vec<Vec<u32>> {
        (0..3).map(|s| (0..12).map(|i| ((i * 7 + s * 5) % 32) as u32).collect()).collect()
    }

    #[test]
    fn fold_preserves_fp_nll() {
        let cfg = ModelConfig::tiny(2);
        let ckpt = Checkpoint::random_init(&cfg, 3).unwrap();
        let stats = collect_calib_stats(&ckpt, &split()).unwrap();
        let base = PreparedModel::fp(&ckpt).unwrap().nll(&split()).unwrap();
        for gens in [false, true] {
            let f = smoothquant_fold(&ckpt, &stats, 0.5, gens).unwrap();
            let nll = f.nll(&QuantPlan::full_precision(), &split()).unwrap();
            assert!((nll - base).abs() < 1e-5, "{nll} vs {base}");
        }
    }

    #[test]
    fn unit_scales_leave_weights_untouched() {
        // alpha = 1 with every activation max equal to one gives s = 1.
        let cfg = ModelConfig::tiny(0);
        let ckpt = Checkpoint::random_init(&cfg, 3).unwrap();
        let mut stats = collect_calib_stats(&ckpt, &split()).unwrap();
        for st in stats.sites.values_mut() {
            st.abs_max.iter_mut().for_each(|v| *v = 1.0);
        }
        let f = smoothquant_fold(&ckpt, &stats, 1.0, true).unwrap();
        assert_eq!(f.checkpoint.tensors, ckpt.tensors);
    }

    #[test]
    fn alpha_out_of_range() {
        let cfg = ModelConfig::tiny(0);
        let ckpt = Checkpoint::random_init(&cfg, 3).unwrap();
        let stats = collect_calib_stats(&ckpt, &split()).unwrap();
        assert!(smoothquant_fold(&ckpt, &stats, 1.5, false).is_err());
    }
}
