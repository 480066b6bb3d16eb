//! Calibration-based post-hoc methods. Every method returns a new
//! checkpoint whose weights absorb the inverse of a runtime input transform,
//! so the full-precision function is unchanged.

pub mod awq;
pub mod quarot;
pub mod rotation;
pub mod smoothquant;
pub mod stats;

pub use awq::{awq_scale, awq_sweep, AwqSweep};
pub use quarot::{quarot_full, quarot_per_linear, QuarotFull, RotationPlan, RotationPlanKind};
pub use rotation::{hadamard, random_orthogonal, randomized_hadamard, RotationKind, RotationSpec};
pub use smoothquant::{smoothquant_fold, smoothquant_sweep, SmoothQuantSweep, SweepPoint};
pub use stats::{collect_calib_stats, CalibStats, ChannelStats};

use crate::error::Result;
use crate::model::{Checkpoint, Params, PreparedModel, SiteId};
use crate::quant::{QuantPlan, SiteTransform};

/// A folded checkpoint together with the runtime transforms it relies on.
#[derive(Debug, Clone)]
pub struct FoldedModel {
    pub checkpoint: Checkpoint,
    pub transforms: Vec<SiteTransform>,
    pub warnings: Vec<String>,
}

impl FoldedModel {
    /// `base` with this model's transforms placed ahead of its own.
    pub fn plan(&self, base: &QuantPlan) -> QuantPlan {
        let mut plan = base.clone();
        plan.transforms = self.transforms.iter().cloned().chain(base.transforms.iter().cloned()).collect();
        plan
    }

    pub fn prepare(&self, base: &QuantPlan) -> Result<PreparedModel> {
        PreparedModel::new(&self.checkpoint, Some(&self.plan(base)))
    }

    pub fn nll(&self, base: &QuantPlan, split: &[Vec<u32>]) -> Result<f64> {
        self.prepare(base)?.nll(split)
    }
}

/// Multiplies weight column `j` of `site` by `scales[j]`; unit scales are
/// left untouched.
pub(crate) fn scale_input_columns(params: &mut Params, site: SiteId, scales: &[f64]) {
    let w = params.layers[site.layer].weight_mut(site.linear);
    for mut row in w.outer_iter_mut() {
        for (v, &s) in row.iter_mut().zip(scales) {
            if s != 1.0 {
                *v *= s;
            }
        }
    }
}
