//! Per-site, per-channel calibration statistics with mergeable FP64
//! accumulators.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{Checkpoint, PreparedModel, SiteId, SiteObserver};

/// Running moments of every input channel of one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub count: u64,
    pub abs_max: Vec<f64>,
    pub mean: Vec<f64>,
    /// Sum of squared deviations from the mean.
    pub m2: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl ChannelStats {
    pub fn new(dim: usize) -> Self {
        ChannelStats {
            count: 0,
            abs_max: vec![0.0; dim],
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.abs_max.len()
    }

    pub fn push(&mut self, row: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for (j, &v) in row.iter().enumerate() {
            self.abs_max[j] = self.abs_max[j].max(v.abs());
            self.sum_sq[j] += v * v;
            let delta = v - self.mean[j];
            self.mean[j] += delta / n;
            self.m2[j] += delta * (v - self.mean[j]);
        }
    }

    /// Combines two disjoint passes (Chan et al. pairwise update).
    pub fn merge(&self, other: &ChannelStats) -> Result<ChannelStats> {
        if self.dim() != other.dim() {
            return Err(LabError::usage("cannot merge channel stats of different widths"));
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mut out = ChannelStats::new(self.dim());
        out.count = self.count + other.count;
        for j in 0..self.dim() {
            out.abs_max[j] = self.abs_max[j].max(other.abs_max[j]);
            out.sum_sq[j] = self.sum_sq[j] + other.sum_sq[j];
            let delta = other.mean[j] - self.mean[j];
            out.mean[j] = self.mean[j] + delta * nb / n;
            out.m2[j] = self.m2[j] + other.m2[j] + delta * delta * na * nb / n;
        }
        Ok(out)
    }

    /// Population standard deviation per channel.
    pub fn std(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2.iter().map(|m| (m / n).max(0.0).sqrt()).collect()
    }

    /// Root-mean-square magnitude per channel (the AWQ importance score).
    pub fn l2_mean(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.sum_sq.iter().map(|s| (s / n).sqrt()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibStats {
    pub sites: BTreeMap<SiteId, ChannelStats>,
    pub tokens: u64,
}

impl CalibStats {
    pub fn site(&self, site: SiteId) -> Result<&ChannelStats> {
        self.sites
            .get(&site)
            .ok_or_else(|| LabError::usage(format!("no calibration statistics for {site}")))
    }

    pub fn merge(&self, other: &CalibStats) -> Result<CalibStats> {
        let mut sites = BTreeMap::new();
        for (site, a) in &self.sites {
            let merged = match other.sites.get(site) {
                Some(b) => a.merge(b)?,
                None => a.clone(),
            };
            sites.insert(*site, merged);
        }
        for (site, b) in &other.sites {
            sites.entry(*site).or_insert_with(|| b.clone());
        }
        Ok(CalibStats {
            sites,
            tokens: self.tokens + other.tokens,
        })
    }
}

struct StatsObserver(BTreeMap<SiteId, ChannelStats>);

impl SiteObserver for StatsObserver {
    fn observe(&mut self, site: SiteId, rows: ArrayView2<f64>) {
        let st = self.0.entry(site).or_insert_with(|| ChannelStats::new(rows.ncols()));
        for row in rows.outer_iter() {
            st.push(row.as_slice().expect("standard layout"));
        }
    }
}

/// Full-precision pass over `calib`, accumulating the inputs of every site.
pub fn collect_calib_stats(ckpt: &Checkpoint, calib: &[Vec<u32>]) -> Result<CalibStats> {
    collect_calib_stats_prepared(&PreparedModel::fp(ckpt)?, calib)
}

/// Same, on an already prepared model (e.g. with transforms installed).
pub fn collect_calib_stats_prepared(model: &PreparedModel, calib: &[Vec<u32>]) -> Result<CalibStats> {
    if calib.iter().all(|c| c.is_empty()) {
        return Err(LabError::usage("calibration split is empty"));
    }
    let mut obs = StatsObserver(BTreeMap::new());
    let mut tokens = 0u64;
    for (i, chunk) in calib.iter().enumerate().filter(|(_, c)| !c.is_empty()) {
        model.forward_observed(chunk, i as u64, &mut obs)?;
        tokens += chunk.len() as u64;
    }
    Ok(CalibStats { sites: obs.0, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn constant_channel() {
        let mut st = ChannelStats::new(2);
        for _ in 0..5 {
            st.push(&[-3.0, 1.0]);
        }
        assert_eq!(st.abs_max, vec![3.0, 1.0]);
        assert_eq!(st.std(), vec![0.0, 0.0]);
        assert_eq!(st.l2_mean(), vec![3.0, 1.0]);
    }

    #[test]
    fn halves_merge_to_full_pass() {
        let cfg = ModelConfig::tiny(2);
        let ckpt = Checkpoint::random_init(&cfg, 5).unwrap();
        let split: Vec<Vec<u32>> = (0..4).map(|s| (0..10).map(|i| ((i * 5 + s * 3) % 32) as u32).collect()).collect();
        let full = collect_calib_stats(&ckpt, &split).unwrap();
        let a = collect_calib_stats(&ckpt, &split[..2]).unwrap();
        let b = collect_calib_stats(&ckpt, &split[2..]).unwrap();
        let merged = a.merge(&b).unwrap();
        assert_eq!(merged.tokens, full.tokens);
        for (site, f) in &full.sites {
            let m = &merged.sites[site];
            assert_eq!(m.count, f.count);
            assert_eq!(m.abs_max, f.abs_max);
            for j in 0..f.dim() {
                assert!((m.mean[j] - f.mean[j]).abs() <= 1e-12 * (1.0 + f.mean[j].abs()));
                assert!((m.m2[j] - f.m2[j]).abs() <= 1e-10 * (1.0 + f.m2[j].abs()));
                assert!((m.sum_sq[j] - f.sum_sq[j]).abs() <= 1e-10 * (1.0 + f.sum_sq[j]));
            }
        }
        assert_eq!(full, collect_calib_stats(&ckpt, &split).unwrap());
    }

    #[test]
    fn empty_split_rejected() {
        let cfg = ModelConfig::tiny(0);
        let ckpt = Checkpoint::random_init(&cfg, 5).unwrap();
        assert!(collect_calib_stats(&ckpt, &[]).is_err());
    }
}
