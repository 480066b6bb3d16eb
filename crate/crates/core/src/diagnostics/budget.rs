//! Excess-NLL budget of W4A4 under skip ablations.

use std::fmt::Write as _;

use crate::error::{LabError, Result};
use crate::model::{Checkpoint, PreparedModel};
use crate::quant::{QuantPlan, SkipGroup};

/// NLLs are snapped to multiples of this before any subtraction. All
/// differences of snapped values are then exact in f64, so the budget
/// identities hold bit-for-bit.
pub const NLL_GRID: f64 = 1.0 / (1u64 << 40) as f64;

pub fn snap_nll(nll: f64) -> f64 {
    (nll / NLL_GRID).round() * NLL_GRID
}

/// A named set of linears kept at full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipSet {
    pub name: String,
    pub groups: Vec<SkipGroup>,
}

impl SkipSet {
    pub fn new(name: &str, groups: &[SkipGroup]) -> Self {
        SkipSet {
            name: name.to_string(),
            groups: groups.to_vec(),
        }
    }

    pub fn is_naive(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn is_all(&self) -> bool {
        self.groups.contains(&SkipGroup::All)
            || [SkipGroup::Readers, SkipGroup::Generators].iter().all(|g| self.groups.contains(g))
    }
}

/// The seven skip configurations of the reference budget table plus
/// skip-all.
pub fn default_grid() -> Vec<SkipSet> {
    vec![
        SkipSet::new("naive", &[]),
        SkipSet::new("skip_qkv", &[SkipGroup::Qkv]),
        SkipSet::new("skip_w1w3", &[SkipGroup::W1W3]),
        SkipSet::new("skip_readers", &[SkipGroup::Readers]),
        SkipSet::new("skip_o_proj", &[SkipGroup::OProj]),
        SkipSet::new("skip_w2", &[SkipGroup::W2]),
        SkipSet::new("skip_generators", &[SkipGroup::Generators]),
        SkipSet::new("skip_all", &[SkipGroup::All]),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetRow {
    pub skip_set: String,
    pub nll: f64,
    pub ppl: f64,
    /// `nll - fp_nll`
    pub delta_nll: f64,
    /// `delta_nll(naive) - delta_nll`
    pub delta_remove: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetReport {
    pub fp_nll: f64,
    pub fp_ppl: f64,
    pub naive_delta: f64,
    pub rows: Vec<BudgetRow>,
}

/// Evaluates `base` (normally W4A4) under every skip set of `grid`. The grid
/// must contain the naive (empty) set and a skip-all set.
pub fn budget_run(ckpt: &Checkpoint, eval: &[Vec<u32>], grid: &[SkipSet], base: &QuantPlan) -> Result<BudgetReport> {
    if !grid.iter().any(SkipSet::is_naive) || !grid.iter().any(SkipSet::is_all) {
        return Err(LabError::usage("budget grid must include the naive set and skip-all"));
    }
    if !base.skip.is_empty() {
        return Err(LabError::usage("base plan for a budget run must not skip anything"));
    }
    let fp_nll = snap_nll(PreparedModel::fp(ckpt)?.nll(eval)?);
    let mut nlls = Vec::with_capacity(grid.len());
    for set in grid {
        let plan = base.clone().with_skip(&set.groups);
        nlls.push(snap_nll(PreparedModel::new(ckpt, Some(&plan))?.nll(eval)?));
    }
    let naive_idx = grid.iter().position(SkipSet::is_naive).expect("checked");
    let naive_delta = nlls[naive_idx] - fp_nll;
    let rows = grid
        .iter()
        .zip(&nlls)
        .map(|(set, &nll)| {
            let delta_nll = nll - fp_nll;
            BudgetRow {
                skip_set: set.name.clone(),
                nll,
                ppl: nll.exp(),
                delta_nll,
                delta_remove: naive_delta - delta_nll,
            }
        })
        .collect();
    Ok(BudgetReport {
        fp_nll,
        fp_ppl: fp_nll.exp(),
        naive_delta,
        rows,
    })
}

impl BudgetReport {
    pub fn row(&self, name: &str) -> Option<&BudgetRow> {
        self.rows.iter().find(|r| r.skip_set == name)
    }

    /// True when `delta_remove + delta_nll == naive_delta` for every row.
    pub fn identities_hold(&self) -> bool {
        self.rows.iter().all(|r| r.delta_remove + r.delta_nll == self.naive_delta)
    }

    /// `skip_set,nll,ppl,delta_nll,delta_remove`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("skip_set,nll,ppl,delta_nll,delta_remove\n");
        let _ = writeln!(out, "fp,{:?},{:?},0.0,", self.fp_nll, self.fp_ppl);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?}",
                r.skip_set, r.nll, r.ppl, r.delta_nll, r.delta_remove
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "fp nll {:.6} (ppl {:.3}); naive excess {:.6} nats\n",
            self.fp_nll, self.fp_ppl, self.naive_delta
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} nll {:.6}  ppl {:>10.3}  dNLL {:>+.6}  dRemove {:>+.6}",
                r.skip_set, r.nll, r.ppl, r.delta_nll, r.delta_remove
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn identities_and_skip_all() {
        let cfg = ModelConfig::tiny(2);
        let ckpt = Checkpoint::random_init(&cfg, 9).unwrap();
        let eval: Vec<Vec<u32>> = (0..3).map(|s| (0..16).map(|i| ((i * 3 + s) % 32) as u32).collect()).collect();
        let rep = budget_run(&ckpt, &eval, &default_grid(), &QuantPlan::w4a4()).unwrap();
        assert!(rep.identities_hold());
        assert_eq!(rep.row("skip_all").unwrap().delta_nll, 0.0);
        assert_eq!(rep.row("naive").unwrap().delta_remove, 0.0);
        assert_eq!(rep.to_csv().lines().count(), 10);
    }

    #[test]
    fn grid_must_bracket() {
        let cfg = ModelConfig::tiny(0);
        let ckpt = Checkpoint::random_init(&cfg, 9).unwrap();
        let eval = vec![vec![1u32, 2, 3]];
        let grid = vec![SkipSet::new("naive", &[])];
        assert!(budget_run(&ckpt, &eval, &grid, &QuantPlan::w4a4()).is_err());
    }

    #[test]
    fn snapping_makes_differences_exact() {
        let a = snap_nll(5.123456789);
        let b = snap_nll(3.3333333333);
        let c = snap_nll(4.0000001);
        assert_eq!((a - b) - (c - b) + (c - b), a - b);
        assert_eq!((a - c) + (c - b), a - b);
    }
}
