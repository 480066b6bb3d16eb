//! Tail metrics, the skip-ablation budget, noise sensitivity and the
//! exact inequalities used to argue about reader and generator inputs.

pub mod budget;
pub mod moments;
pub mod noise;
pub mod tails;

pub use budget::{budget_run, default_grid, snap_nll, BudgetReport, BudgetRow, SkipSet};
pub use moments::{
    aggregate_bound_holds, excess_kurtosis, fourth_moment_identity_check, inf_norm_induced, norm_bound_holds,
};
pub use noise::{noise_plan, noise_sweep, NoisePoint, NoiseSweepReport, NoiseSummary};
pub use tails::{lower_median, site_tail, tail_report, LinearSummary, SiteTail, TailReport};
