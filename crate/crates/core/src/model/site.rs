//! Identification of the five input-activation sites of a SwiGLU block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::LabError;

/// The five trainable linears of a block, in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linear {
    Qkv,
    OProj,
    W1,
    W3,
    W2,
}

impl Linear {
    pub const ALL: [Linear; 5] = [Linear::Qkv, Linear::OProj, Linear::W1, Linear::W3, Linear::W2];

    /// Position in [`Linear::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Linear::Qkv => "qkv",
            Linear::OProj => "o_proj",
            Linear::W1 => "w1",
            Linear::W3 => "w3",
            Linear::W2 => "w2",
        }
    }

    /// Readers consume RMSNorm of the residual stream; generators consume a
    /// quantity produced inside the block.
    pub fn kind(self) -> SiteKind {
        match self {
            Linear::Qkv | Linear::W1 | Linear::W3 => SiteKind::Reader,
            Linear::OProj | Linear::W2 => SiteKind::Generator,
        }
    }

    /// Input width of this linear for the given model dimensions.
    pub fn in_dim(self, d_model: usize, d_inner: usize) -> usize {
        match self {
            Linear::W2 => d_inner,
            _ => d_model,
        }
    }
}

impl fmt::Display for Linear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Linear {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qkv" => Ok(Linear::Qkv),
            "o_proj" => Ok(Linear::OProj),
            "w1" => Ok(Linear::W1),
            "w3" => Ok(Linear::W3),
            "w2" => Ok(Linear::W2),
            other => Err(LabError::config(format!("unknown linear '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Reader,
    Generator,
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SiteKind::Reader => "reader",
            SiteKind::Generator => "generator",
        })
    }
}

/// One input-activation site: a (layer, linear) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub linear: Linear,
}

impl SiteId {
    pub fn new(layer: usize, linear: Linear) -> Self {
        SiteId { layer, linear }
    }

    pub fn kind(&self) -> SiteKind {
        self.linear.kind()
    }

    /// Every site of an `n_layers` model in forward order.
    pub fn all(n_layers: usize) -> Vec<SiteId> {
        (0..n_layers)
            .flat_map(|layer| Linear::ALL.iter().map(move |&linear| SiteId { layer, linear }))
            .collect()
    }
}

pub fn site_kind(site: SiteId) -> SiteKind {
    site.kind()
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.linear)
    }
}

impl FromStr for SiteId {
    type Err = LabError;

    /// Parses the `layer{i}.{linear}` form produced by `Display`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || LabError::config(format!("malformed site id '{s}'"));
        let rest = s.strip_prefix("layer").ok_or_else(bad)?;
        let (layer, linear) = rest.split_once('.').ok_or_else(bad)?;
        Ok(SiteId {
            layer: layer.parse().map_err(|_| bad())?,
            linear: linear.parse()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy() {
        assert_eq!(site_kind(SiteId::new(0, Linear::Qkv)), SiteKind::Reader);
        assert_eq!(site_kind(SiteId::new(3, Linear::W2)), SiteKind::Generator);
        for layer in 0..6 {
            assert_eq!(site_kind(SiteId::new(layer, Linear::OProj)), SiteKind::Generator);
            assert_eq!(site_kind(SiteId::new(layer, Linear::W1)), SiteKind::Reader);
            assert_eq!(site_kind(SiteId::new(layer, Linear::W3)), SiteKind::Reader);
        }
    }

    #[test]
    fn site_id_text_roundtrip() {
        for site in SiteId::all(3) {
            let parsed: SiteId = site.to_string().parse().unwrap();
            assert_eq!(parsed, site);
        }
        assert!("layer1.w4".parse::<SiteId>().is_err());
        assert!("l1.w2".parse::<SiteId>().is_err());
    }
}
