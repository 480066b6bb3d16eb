//! Fake quantization of weights and activations, and the per-site plan.

pub mod plan;
pub mod rtn;

pub use plan::{QuantPlan, SiteTransform, SkipEntry, SkipGroup, Transform};
pub use rtn::{
    quantize_act_per_token, quantize_act_rows, quantize_weight_rtn, ActQuantSpec, Grouping, WeightQuantSpec,
};

use crate::error::Result;
use crate::model::{Checkpoint, PreparedModel};

/// Installs `plan` on `ckpt`: weights of quantized sites are quantized once,
/// activation quantizers and transforms are attached for later forwards.
pub fn apply_plan(ckpt: &Checkpoint, plan: &QuantPlan) -> Result<PreparedModel> {
    PreparedModel::new(ckpt, Some(plan))
}
