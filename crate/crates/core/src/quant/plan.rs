//! `QuantPlan`: which sites are quantized, with which specs, and which
//! pre-quantization transforms run on each site's input.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::rtn::{ActQuantSpec, Grouping, WeightQuantSpec};
use crate::error::{LabError, Result};
use crate::model::{Linear, SiteId, SiteKind};
use crate::posthoc::rotation::RotationSpec;

/// Named subsets of the five linears, applied at every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipGroup {
    All,
    Readers,
    Generators,
    Qkv,
    W1W3,
    OProj,
    W2,
}

impl SkipGroup {
    pub fn contains(self, linear: Linear) -> bool {
        match self {
            SkipGroup::All => true,
            SkipGroup::Readers => linear.kind() == SiteKind::Reader,
            SkipGroup::Generators => linear.kind() == SiteKind::Generator,
            SkipGroup::Qkv => linear == Linear::Qkv,
            SkipGroup::W1W3 => matches!(linear, Linear::W1 | Linear::W3),
            SkipGroup::OProj => linear == Linear::OProj,
            SkipGroup::W2 => linear == Linear::W2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SkipGroup::All => "all",
            SkipGroup::Readers => "readers",
            SkipGroup::Generators => "generators",
            SkipGroup::Qkv => "qkv",
            SkipGroup::W1W3 => "w1w3",
            SkipGroup::OProj => "o_proj",
            SkipGroup::W2 => "w2",
        }
    }
}

impl fmt::Display for SkipGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SkipGroup {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => SkipGroup::All,
            "readers" => SkipGroup::Readers,
            "generators" => SkipGroup::Generators,
            "qkv" => SkipGroup::Qkv,
            "w1w3" | "w1,w3" => SkipGroup::W1W3,
            "o_proj" => SkipGroup::OProj,
            "w2" => SkipGroup::W2,
            other => return Err(LabError::config(format!("unknown skip group '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipEntry {
    Group(SkipGroup),
    Site(SiteId),
}

/// A transform applied to a site's input rows before activation
/// quantization. Scale and rotation transforms assume the matching inverse
/// has been folded into the site's weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Transform {
    /// `x_j / divisor_j`
    InputScale { divisor: Vec<f64> },
    /// `x -> Q x`
    Rotation { rotation: RotationSpec },
    /// Adds `N(0, std_j^2)` per channel, fresh per token.
    Noise {
        std: Vec<f64>,
        #[serde(with = "crate::seeds::seed_serde")]
        seed: u64,
    },
}

impl Transform {
    pub fn dim(&self) -> usize {
        match self {
            Transform::InputScale { divisor } => divisor.len(),
            Transform::Rotation { rotation } => rotation.dim(),
            Transform::Noise { std, .. } => std.len(),
        }
    }

    pub fn is_online_rotation(&self) -> bool {
        matches!(self, Transform::Rotation { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTransform {
    pub site: SiteId,
    pub transform: Transform,
}

/// Per-site quantization settings. `weight`/`act` set to `None` keep that
/// path at full precision everywhere (weight-only or activation-only runs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub weight: Option<WeightQuantSpec>,
    pub act: Option<ActQuantSpec>,
    #[serde(default)]
    pub skip: Vec<SkipEntry>,
    #[serde(default)]
    pub transforms: Vec<SiteTransform>,
}

impl QuantPlan {
    /// Naive W4A4: INT4 g128 weights and per-token INT4 activations at
    /// every linear.
    pub fn w4a4() -> Self {
        QuantPlan {
            weight: Some(WeightQuantSpec::int4_g128()),
            act: Some(ActQuantSpec::int4()),
            skip: Vec::new(),
            transforms: Vec::new(),
        }
    }

    pub fn weight_only(bits: u8, grouping: Grouping) -> Self {
        QuantPlan {
            weight: Some(WeightQuantSpec { bits, grouping }),
            act: None,
            skip: Vec::new(),
            transforms: Vec::new(),
        }
    }

    /// No quantization anywhere; used to carry transforms at full precision.
    pub fn full_precision() -> Self {
        QuantPlan {
            weight: None,
            act: None,
            skip: Vec::new(),
            transforms: Vec::new(),
        }
    }

    pub fn with_skip(mut self, groups: &[SkipGroup]) -> Self {
        self.skip.extend(groups.iter().map(|&g| SkipEntry::Group(g)));
        self
    }

    pub fn with_transform(mut self, site: SiteId, transform: Transform) -> Self {
        self.transforms.push(SiteTransform { site, transform });
        self
    }

    pub fn is_skipped(&self, site: SiteId) -> bool {
        self.skip.iter().any(|e| match e {
            SkipEntry::Group(g) => g.contains(site.linear),
            SkipEntry::Site(s) => *s == site,
        })
    }

    /// Transforms attached to `site`, in application order.
    pub fn transforms_for(&self, site: SiteId) -> impl Iterator<Item = &Transform> {
        self.transforms
            .iter()
            .filter(move |t| t.site == site)
            .map(|t| &t.transform)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(w) = &self.weight {
            w.validate()?;
        }
        if let Some(a) = &self.act {
            a.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes to TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: QuantPlan =
            toml::from_str(text).map_err(|e| LabError::config(format!("plan parse: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posthoc::rotation::RotationKind;
    use proptest::prelude::*;

    #[test]
    fn groups_cover_the_taxonomy() {
        let plan = QuantPlan::w4a4().with_skip(&[SkipGroup::Readers]);
        assert!(plan.is_skipped(SiteId::new(2, Linear::W3)));
        assert!(!plan.is_skipped(SiteId::new(2, Linear::W2)));
        let plan = QuantPlan::w4a4().with_skip(&[SkipGroup::W1W3, SkipGroup::OProj]);
        assert!(plan.is_skipped(SiteId::new(0, Linear::W1)));
        assert!(plan.is_skipped(SiteId::new(0, Linear::OProj)));
        assert!(!plan.is_skipped(SiteId::new(0, Linear::Qkv)));
        for site in SiteId::all(3) {
            assert!(QuantPlan::w4a4().with_skip(&[SkipGroup::All]).is_skipped(site));
        }
    }

    fn arb_transform() -> impl Strategy<Value = Transform> {
        prop_oneof![
            prop::collection::vec(1e-6f64..1e6, 1..8).prop_map(|divisor| Transform::InputScale { divisor }),
            (any::<u64>(), 1usize..5).prop_map(|(seed, blocks)| Transform::Rotation {
                rotation: RotationSpec {
                    kind: RotationKind::RandomizedHadamard,
                    block: 8,
                    blocks,
                    seed,
                }
            }),
            (prop::collection::vec(0.0f64..3.0, 1..8), any::<u64>())
                .prop_map(|(std, seed)| Transform::Noise { std, seed }),
        ]
    }

    proptest! {
        #[test]
        fn plan_text_roundtrip(
            transforms in prop::collection::vec((0usize..4, 0usize..5, arb_transform()), 0..4),
            skip_site in proptest::option::of((0usize..4, 0usize..5)),
            weight_only in any::<bool>(),
        ) {
            let mut plan = if weight_only { QuantPlan::weight_only(8, Grouping::PerChannel) } else { QuantPlan::w4a4() };
            plan = plan.with_skip(&[SkipGroup::W2]);
            if let Some((l, i)) = skip_site {
                plan.skip.push(SkipEntry::Site(SiteId::new(l, Linear::ALL[i])));
            }
            for (l, i, t) in transforms {
                plan = plan.with_transform(SiteId::new(l, Linear::ALL[i]), t);
            }
            let text = plan.to_toml();
            prop_assert_eq!(QuantPlan::from_toml(&text).unwrap(), plan);
        }
    }
}
