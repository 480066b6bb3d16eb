//! Per-site tail report over captured reservoirs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::moments::excess_kurtosis;
use crate::error::Result;
use crate::model::{Linear, Reservoir, SiteId, SiteKind};

#[derive(Debug, Clone, PartialEq)]
pub struct SiteTail {
    /// Per-channel excess kurtosis; `None` for zero-variance channels.
    pub kurtosis: Vec<Option<f64>>,
    /// Largest defined channel kurtosis.
    pub kurt_max: Option<f64>,
    pub kurt_max_channel: Option<usize>,
    pub undefined_channels: usize,
    /// Per-channel L∞ over the reservoir.
    pub channel_inf: Vec<f64>,
    /// Max-channel over lower-median-channel L∞; `None` when the median is 0.
    pub severity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSummary {
    pub linear: Linear,
    /// Mean over layers of the per-layer channel-max kurtosis.
    pub mean_kurt_max: Option<f64>,
    pub mean_severity: Option<f64>,
    /// Layers contributing to the means.
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailReport {
    pub sites: BTreeMap<SiteId, SiteTail>,
    pub per_linear: Vec<LinearSummary>,
    /// Sites expected but absent from the input, or with too few rows.
    pub gaps: Vec<SiteId>,
}

/// Lower median (the `(n-1)/2`-th order statistic).
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

/// Tail statistics of one site's `[n, d]` sample.
pub fn site_tail(columns: &[Vec<f64>]) -> Result<SiteTail> {
    let mut kurtosis = Vec::with_capacity(columns.len());
    for c in columns {
        kurtosis.push(excess_kurtosis(c)?);
    }
    let mut kurt_max: Option<f64> = None;
    let mut kurt_max_channel = None;
    for (j, k) in kurtosis.iter().enumerate() {
        if let Some(k) = *k {
            if kurt_max.is_none_or(|m| k > m) {
                kurt_max = Some(k);
                kurt_max_channel = Some(j);
            }
        }
    }
    let channel_inf: Vec<f64> = columns.iter().map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect();
    let max = channel_inf.iter().copied().fold(0.0, f64::max);
    let severity = lower_median(&channel_inf).filter(|&m| m > 0.0).map(|m| max / m);
    Ok(SiteTail {
        undefined_channels: kurtosis.iter().filter(|k| k.is_none()).count(),
        kurtosis,
        kurt_max,
        kurt_max_channel,
        channel_inf,
        severity,
    })
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Builds the report for `n_layers` blocks from per-site reservoirs.
pub fn tail_report(reservoirs: &BTreeMap<SiteId, Reservoir>, n_layers: usize) -> Result<TailReport> {
    let mut sites = BTreeMap::new();
    let mut gaps = Vec::new();
    for site in SiteId::all(n_layers) {
        match reservoirs.get(&site) {
            Some(r) if r.rows().len() >= 4 => {
                let cols: Vec<Vec<f64>> = (0..r.dim()).map(|j| r.column(j)).collect();
                sites.insert(site, site_tail(&cols)?);
            }
            _ => gaps.push(site),
        }
    }
    let per_linear = Linear::ALL
        .iter()
        .map(|&linear| {
            let of_linear: Vec<&SiteTail> = sites
                .iter()
                .filter(|(s, _)| s.linear == linear)
                .map(|(_, t)| t)
                .collect();
            LinearSummary {
                linear,
                mean_kurt_max: mean_defined(of_linear.iter().map(|t| t.kurt_max)),
                mean_severity: mean_defined(of_linear.iter().map(|t| t.severity)),
                layers: of_linear.len(),
            }
        })
        .collect();
    Ok(TailReport {
        sites,
        per_linear,
        gaps,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:?}"))
}

impl TailReport {
    /// `layer,linear,kind,kurt_max,severity`, one row per site.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,linear,kind,kurt_max,severity\n");
        for (site, t) in &self.sites {
            let kind = match site.kind() {
                SiteKind::Reader => "reader",
                SiteKind::Generator => "generator",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                site.layer,
                site.linear,
                kind,
                opt(t.kurt_max),
                opt(t.severity)
            );
        }
        out
    }

    /// Human-readable summary at full precision.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.per_linear {
            let _ = writeln!(
                out,
                "{:<7} {:<9} mean_kurt_max={} mean_severity={} layers={}",
                s.linear.name(),
                match s.linear.kind() {
                    SiteKind::Reader => "reader",
                    SiteKind::Generator => "generator",
                },
                opt(s.mean_kurt_max),
                opt(s.mean_severity),
                s.layers
            );
        }
        for (site, t) in &self.sites {
            if t.undefined_channels > 0 {
                let _ = writeln!(out, "{site}: {} zero-variance channel(s)", t.undefined_channels);
            }
        }
        for g in &self.gaps {
            let _ = writeln!(out, "{g}: missing or too few captured rows");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_reservoirs(n_layers: usize, n: usize, d: usize, seed: u64) -> BTreeMap<SiteId, Reservoir> {
        let mut rng = rng_for(seed, "tail_test", &[]);
        SiteId::all(n_layers)
            .into_iter()
            .map(|s| {
                let rows = (0..n)
                    .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect();
                (s, Reservoir::from_rows(rows))
            })
            .collect()
    }

    #[test]
    fn gaussian_trace_is_light_tailed() {
        let res = gaussian_reservoirs(2, 20_000, 8, 1);
        let rep = tail_report(&res, 2).unwrap();
        for s in &rep.per_linear {
            let k = s.mean_kurt_max.unwrap();
            assert!((-0.5..=0.5).contains(&k), "{k}");
        }
        assert!(rep.gaps.is_empty());
    }

    #[test]
    fn planted_spike_channel_dominates() {
        let mut res = gaussian_reservoirs(2, 20_000, 8, 2);
        let target = SiteId::new(1, Linear::W2);
        let mut rng = rng_for(3, "spikes", &[]);
        let rows: Vec<Vec<f64>> = res[&target]
            .rows()
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if rng.random_bool(0.002) {
                    r[5] *= 100.0;
                }
                r
            })
            .collect();
        res.insert(target, Reservoir::from_rows(rows));
        let rep = tail_report(&res, 2).unwrap();
        let planted = rep.sites[&target].kurt_max.unwrap();
        assert_eq!(rep.sites[&target].kurt_max_channel, Some(5));
        for (s, t) in &rep.sites {
            if *s != target {
                assert!(planted > 10.0 * t.kurt_max.unwrap().abs().max(1.0));
            }
        }
    }

    #[test]
    fn identical_channels_have_unit_severity_and_gaps_are_flagged() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 - 4.5; 6]).collect();
        let mut res = BTreeMap::new();
        res.insert(SiteId::new(0, Linear::Qkv), Reservoir::from_rows(rows));
        let rep = tail_report(&res, 1).unwrap();
        assert_eq!(rep.sites[&SiteId::new(0, Linear::Qkv)].severity, Some(1.0));
        assert_eq!(rep.gaps.len(), 4);
        assert!(rep.to_csv().starts_with("layer,linear,kind,kurt_max,severity\n0,qkv,reader,"));
    }
}
