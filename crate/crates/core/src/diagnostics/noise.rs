//! Sensitivity of the full-precision model to Gaussian noise injected at a
//! site's input, scaled to each channel's calibration spread.

use std::fmt::Write as _;

use crate::error::{LabError, Result};
use crate::model::{Checkpoint, Linear, PreparedModel, SiteId};
use crate::posthoc::CalibStats;
use crate::quant::{QuantPlan, SiteTransform, Transform};

pub const DEFAULT_SIGMAS: [f64; 7] = [0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2];
pub const DEFAULT_SITES: [Linear; 2] = [Linear::OProj, Linear::W2];

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePoint {
    pub site: Linear,
    pub sigma_rel: f64,
    pub seed: u64,
    pub delta_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSweepReport {
    pub fp_nll: f64,
    pub points: Vec<NoisePoint>,
    pub seeds: Vec<u64>,
}

/// Mean and standard error over seeds at one `(site, sigma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSummary {
    pub sigma_rel: f64,
    pub mean: f64,
    pub std_err: f64,
}

/// Noise at `linear`'s input in every layer with per-channel std
/// `sigma_rel * calib_std`. `sigma_rel = 0` attaches nothing.
pub fn noise_plan(stats: &CalibStats, n_layers: usize, linear: Linear, sigma_rel: f64, seed: u64) -> Result<QuantPlan> {
    let mut plan = QuantPlan::full_precision();
    if sigma_rel == 0.0 {
        return Ok(plan);
    }
    for layer in 0..n_layers {
        let site = SiteId::new(layer, linear);
        let std: Vec<f64> = stats.site(site)?.std().iter().map(|s| sigma_rel * s).collect();
        plan.transforms.push(SiteTransform {
            site,
            transform: Transform::Noise { std, seed },
        });
    }
    Ok(plan)
}

pub fn noise_sweep(
    ckpt: &Checkpoint,
    eval: &[Vec<u32>],
    stats: &CalibStats,
    sites: &[Linear],
    sigmas: &[f64],
    seeds: &[u64],
) -> Result<NoiseSweepReport> {
    if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(LabError::usage("noise levels must be finite and non-negative"));
    }
    if seeds.is_empty() {
        return Err(LabError::usage("noise sweep needs at least one seed"));
    }
    let n_layers = ckpt.config.n_layers;
    for &linear in sites {
        for layer in 0..n_layers {
            stats.site(SiteId::new(layer, linear))?;
        }
    }
    let fp = PreparedModel::fp(ckpt)?;
    let fp_nll = fp.nll(eval)?;
    let mut points = Vec::new();
    for &site in sites {
        for &sigma_rel in sigmas {
            for &seed in seeds {
                let delta_loss = if sigma_rel == 0.0 {
                    0.0
                } else {
                    let plan = noise_plan(stats, n_layers, site, sigma_rel, seed)?;
                    PreparedModel::new(ckpt, Some(&plan))?.nll(eval)? - fp_nll
                };
                points.push(NoisePoint {
                    site,
                    sigma_rel,
                    seed,
                    delta_loss,
                });
            }
        }
    }
    Ok(NoiseSweepReport {
        fp_nll,
        points,
        seeds: seeds.to_vec(),
    })
}

impl NoiseSweepReport {
    pub fn summary(&self, site: Linear) -> Vec<NoiseSummary> {
        let mut sigmas: Vec<f64> = Vec::new();
        for p in self.points.iter().filter(|p| p.site == site) {
            if !sigmas.contains(&p.sigma_rel) {
                sigmas.push(p.sigma_rel);
            }
        }
        sigmas
            .into_iter()
            .map(|sigma_rel| {
                let v: Vec<f64> = self
                    .points
                    .iter()
                    .filter(|p| p.site == site && p.sigma_rel == sigma_rel)
                    .map(|p| p.delta_loss)
                    .collect();
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let std_err = if v.len() > 1 {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
                } else {
                    0.0
                };
                NoiseSummary {
                    sigma_rel,
                    mean,
                    std_err,
                }
            })
            .collect()
    }

    /// Mean loss increase is non-decreasing in sigma up to two combined
    /// standard errors between consecutive levels.
    pub fn monotone_within_2se(&self, site: Linear) -> bool {
        let mut s = self.summary(site);
        s.sort_by(|a, b| a.sigma_rel.total_cmp(&b.sigma_rel));
        s.windows(2).all(|w| {
            let tol = 2.0 * (w[0].std_err.powi(2) + w[1].std_err.powi(2)).sqrt();
            w[1].mean >= w[0].mean - tol
        })
    }

    /// `site,sigma_rel,delta_loss,seed`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("site,sigma_rel,delta_loss,seed\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{:?},{:?},{}", p.site, p.sigma_rel, p.delta_loss, p.seed);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("fp nll {:?}\n", self.fp_nll);
        let mut sites: Vec<Linear> = self.points.iter().map(|p| p.site).collect();
        sites.dedup();
        for site in sites {
            for s in self.summary(site) {
                let _ = writeln!(
                    out,
                    "{:<7} sigma_rel {:<6} dloss {:+.3e} +- {:.1e}",
                    site.name(),
                    s.sigma_rel,
                    s.mean,
                    s.std_err
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::posthoc::collect_calib_stats;

    #[test]
    fn zero_sigma_is_exact_and_runs_are_deterministic() {
        let cfg = ModelConfig::tiny(2);
        let ckpt = Checkpoint::random_init(&cfg, 2).unwrap();
        let split: Vec<Vec<u32>> = (0..4).map(|s| (0..16).map(|i| ((i * 5 + s * 3) % 32) as u32).collect()).collect();
        let stats = collect_calib_stats(&ckpt, &split[..2]).unwrap();
        let sweep = || noise_sweep(&ckpt, &split[2..], &stats, &DEFAULT_SITES, &[0.0, 0.1, 1.0], &[1, 2, 3]).unwrap();
        let rep = sweep();
        assert!(rep.points.iter().filter(|p| p.sigma_rel == 0.0).all(|p| p.delta_loss == 0.0));
        assert!(rep.points.iter().filter(|p| p.sigma_rel > 0.0).any(|p| p.delta_loss != 0.0));
        assert_eq!(rep, sweep());
        assert_eq!(rep.to_csv().lines().count(), 1 + 2 * 3 * 3);
    }

    #[test]
    fn missing_stats_is_usage_error() {
        let cfg = ModelConfig::tiny(0);
        let ckpt = Checkpoint::random_init(&cfg, 2).unwrap();
        let stats = CalibStats {
            sites: Default::default(),
            tokens: 0,
        };
        let err = noise_sweep(&ckpt, &[vec![1, 2, 3]], &stats, &DEFAULT_SITES, &[0.1], &[1]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
