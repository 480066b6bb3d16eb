//! Central finite-difference check of the analytic gradient.
//!
//! The numerical side evaluates the loss through the inference forward pass,
//! so the check also ties the training forward to the evaluation forward.

use ndarray::s;
use rand::Rng;

use super::backward::{batch_loss, loss_and_grad, SinkSettings};
use crate::error::{LabError, Result};
use crate::model::{ModelConfig, ParamKind, Params, PreparedModel, SiteId, SiteObserver};
use crate::seeds::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Probes dropped because a perturbation moved a hinge across its kink.
    pub excluded_at_hinge: usize,
    /// Number of tokens with an active hinge in the probe batch.
    pub active_hinge_tokens: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Parameters spread wide enough that gradients are well above rounding
/// noise: matrices at std 0.2, gains jittered around one.
pub fn probe_params(cfg: &ModelConfig, seed: u64) -> Params {
    let mut p = Params::init(cfg, seed);
    let mut rng = rng_for(seed, "gradcheck_params", &[]);
    for (kind, sl) in p.slices_mut() {
        for v in sl.iter_mut() {
            match kind {
                ParamKind::Matrix => *v *= 10.0,
                ParamKind::Gain => *v = 1.0 + rng.random_range(-0.3..0.3),
            }
        }
    }
    p
}

/// Pattern of active hinges: (sequence, token, boundary, arg-max channel).
fn hinge_pattern(cfg: &ModelConfig, params: &Params, batch: &[Vec<u32>], sink: &SinkSettings) -> Result<Vec<(usize, usize, usize, usize)>> {
    struct Residuals(Vec<ndarray::Array2<f64>>);
    impl SiteObserver for Residuals {
        fn observe(&mut self, _site: SiteId, _rows: ndarray::ArrayView2<f64>) {}
        fn observe_residual(&mut self, _layer: usize, rows: ndarray::ArrayView2<f64>) {
            self.0.push(rows.to_owned());
        }
    }
    let mut out = Vec::new();
    if sink.channels == 0 {
        return Ok(out);
    }
    let model = PreparedModel::from_params(cfg.clone(), params.clone(), None)?;
    let d = cfg.d_model;
    for (si, seq) in batch.iter().enumerate() {
        let mut res = Residuals(Vec::new());
        model.forward_observed(seq, 0, &mut res)?;
        for (b, r) in res.0.iter().enumerate().take(cfg.n_layers) {
            if b > 0 && !sink.every_block {
                break;
            }
            for (t, row) in r.slice(s![.., d - sink.channels..]).outer_iter().enumerate() {
                let (mut arg, mut best) = (0, f64::NEG_INFINITY);
                for (j, v) in row.iter().enumerate() {
                    if v.abs() > best {
                        best = v.abs();
                        arg = j;
                    }
                }
                if best > sink.tau {
                    out.push((si, t, b, arg));
                }
            }
        }
    }
    Ok(out)
}

/// Compares analytic and central-difference gradients (step `h`) on
/// `per_tensor` random entries of every parameter tensor.
pub fn grad_check(
    cfg: &ModelConfig,
    params: &Params,
    batch: &[Vec<u32>],
    sink: &SinkSettings,
    per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if cfg.d_model > 16 {
        return Err(LabError::usage("grad_check is meant for tiny models (d_model <= 16)"));
    }
    let (_, analytic) = loss_and_grad(cfg, params, batch, sink)?;
    let base_pattern = hinge_pattern(cfg, params, batch, sink)?;
    let mut rng = rng_for(seed, "gradcheck_probes", &[]);
    let sizes: Vec<usize> = params.slices().iter().map(|(_, s)| s.len()).collect();
    let mut max_rel = 0.0f64;
    let mut probes = 0;
    let mut excluded = 0;
    for (ti, &n) in sizes.iter().enumerate() {
        if n == 0 {
            continue;
        }
        for _ in 0..per_tensor {
            let idx = rng.random_range(0..n);
            let eval = |delta: f64| -> Result<(f64, bool)> {
                let mut p = params.clone();
                p.slices_mut()[ti].1[idx] += delta;
                let same = hinge_pattern(cfg, &p, batch, sink)? == base_pattern;
                Ok((batch_loss(cfg, &p, batch, sink)?.total(), same))
            };
            let (plus, same_p) = eval(h)?;
            let (minus, same_m) = eval(-h)?;
            if !(same_p && same_m) {
                excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.slices()[ti].1[idx];
            max_rel = max_rel.max(relative_error(a, numeric, 1e-6));
            probes += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        probes,
        excluded_at_hinge: excluded,
        active_hinge_tokens: base_pattern.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_batch_has_zero_gradient() {
        let cfg = ModelConfig::tiny(2);
        let params = probe_params(&cfg, 1);
        let batch = vec![vec![3u32], vec![5u32]];
        let (loss, g) = loss_and_grad(&cfg, &params, &batch, &SinkSettings::disabled()).unwrap();
        assert_eq!(loss.total(), 0.0);
        let worst = g.slices().iter().flat_map(|(_, s)| s.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst <= 1e-10);
    }
}

#[cfg(test)]
mod check_tests {
    use super::*;

    fn batch(cfg: &ModelConfig) -> Vec<Vec<u32>> {
        let mut rng = rng_for(9, "gc_batch", &[]);
        (0..2)
            .map(|_| (0..6).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect())
            .collect()
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        // (k, hinge channels, every block)
        for (k, ch, every) in [(0usize, 0usize, false), (2, 2, true), (2, 2, false), (0, 2, false)] {
            let cfg = ModelConfig::tiny(k);
            let params = probe_params(&cfg, 3);
            let b = batch(&cfg);
            let sink = if ch > 0 {
                SinkSettings { lambda: 0.5, tau: 0.3, channels: ch, every_block: every }
            } else {
                SinkSettings::disabled()
            };
            let r = grad_check(&cfg, &params, &b, &sink, 6, 1e-5, 4).unwrap();
            eprintln!("k={k} {r:?}");
            assert!(r.max_rel_error < 1e-4, "{r:?}");
            if ch > 0 {
                assert!(r.active_hinge_tokens > 0);
            }
        }
    }
}
