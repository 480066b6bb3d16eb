//! TOML experiment and training specifications.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{check_disjoint, load_split};
use crate::diagnostics::{noise::DEFAULT_SIGMAS, SkipSet};
use crate::error::{LabError, Result};
use crate::model::Linear;
use crate::posthoc::{awq, smoothquant};
use crate::quant::{ActQuantSpec, Grouping, SkipGroup, WeightQuantSpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub eval: PathBuf,
    pub calib: PathBuf,
    /// Chunk length in bytes; defaults to the model's `seq_len_max`.
    #[serde(default)]
    pub chunk_len: Option<usize>,
    #[serde(default)]
    pub eval_max_chunks: Option<usize>,
    #[serde(default)]
    pub calib_max_chunks: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    pub weight_bits: u8,
    /// Group size along the input axis; 0 means one group per output row.
    pub group_size: usize,
    pub act_bits: u8,
}

impl Default for QuantSection {
    fn default() -> Self {
        QuantSection {
            weight_bits: 4,
            group_size: 128,
            act_bits: 4,
        }
    }
}

impl QuantSection {
    pub fn weight(&self) -> WeightQuantSpec {
        WeightQuantSpec {
            bits: self.weight_bits,
            grouping: if self.group_size == 0 {
                Grouping::PerChannel
            } else {
                Grouping::Group(self.group_size)
            },
        }
    }

    pub fn act(&self) -> ActQuantSpec {
        ActQuantSpec { bits: self.act_bits }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothQuantSection {
    pub alphas: Vec<f64>,
    pub include_generators: bool,
}

impl Default for SmoothQuantSection {
    fn default() -> Self {
        SmoothQuantSection {
            alphas: smoothquant::DEFAULT_ALPHAS.to_vec(),
            include_generators: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AwqSection {
    pub fractions: Vec<f64>,
    pub factors: Vec<f64>,
}

impl Default for AwqSection {
    fn default() -> Self {
        AwqSection {
            fractions: awq::DEFAULT_FRACTIONS.to_vec(),
            factors: awq::DEFAULT_FACTORS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuarotSection {
    #[serde(with = "crate::seeds::seed_serde")]
    pub seed: u64,
}

impl Default for QuarotSection {
    fn default() -> Self {
        QuarotSection { seed: 1234 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    /// Entries like `"naive"`, `"skip_readers"`, `"skip_o_proj+w2"`.
    pub grid: Vec<String>,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            grid: crate::diagnostics::default_grid().into_iter().map(|s| s.name).collect(),
        }
    }
}

/// Parses a skip-set label: `naive`, or `skip_` followed by `+`-joined
/// skip groups.
pub fn parse_skip_set(label: &str) -> Result<SkipSet> {
    if label == "naive" {
        return Ok(SkipSet::new("naive", &[]));
    }
    let body = label.strip_prefix("skip_").unwrap_or(label);
    let groups = body
        .split('+')
        .map(|g| g.parse::<SkipGroup>())
        .collect::<Result<Vec<_>>>()?;
    let name = format!("skip_{}", groups.iter().map(|g| g.name()).collect::<Vec<_>>().join("+"));
    Ok(SkipSet { name, groups })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailsSection {
    pub reservoir_cap: usize,
    #[serde(with = "crate::seeds::seed_serde")]
    pub seed: u64,
}

impl Default for TailsSection {
    fn default() -> Self {
        TailsSection {
            reservoir_cap: crate::model::CaptureSpec::DEFAULT_CAP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub sigmas: Vec<f64>,
    pub sites: Vec<Linear>,
    pub seeds: Vec<u64>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            sigmas: DEFAULT_SIGMAS.to_vec(),
            sites: crate::diagnostics::noise::DEFAULT_SITES.to_vec(),
            seeds: vec![1, 2, 3],
        }
    }
}

/// Everything an evaluation command needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub checkpoints: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub data: DataSpec,
    #[serde(default)]
    pub quant: QuantSection,
    #[serde(default)]
    pub smoothquant: SmoothQuantSection,
    #[serde(default)]
    pub awq: AwqSection,
    #[serde(default)]
    pub quarot: QuarotSection,
    #[serde(default)]
    pub budget: BudgetSection,
    #[serde(default)]
    pub tails: TailsSection,
    #[serde(default)]
    pub noise: NoiseSection,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| LabError::config(format!("experiment spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a spec file; relative paths inside it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut spec = ExperimentSpec::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.checkpoints = spec.checkpoints.iter().map(|p| resolve(base, p)).collect();
        spec.output_dir = resolve(base, &spec.output_dir);
        spec.data.eval = resolve(base, &spec.data.eval);
        spec.data.calib = resolve(base, &spec.data.calib);
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.checkpoints.is_empty() {
            return Err(LabError::config("spec lists no checkpoints"));
        }
        self.quant.weight().validate()?;
        self.quant.act().validate()?;
        if self.smoothquant.alphas.is_empty() || self.smoothquant.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(LabError::usage("smoothquant alphas must be a non-empty list in [0, 1]"));
        }
        if self.awq.fractions.is_empty() || self.awq.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(LabError::usage("awq fractions must be a non-empty list in (0, 1]"));
        }
        if self.awq.factors.is_empty() || self.awq.factors.iter().any(|f| !(f.is_finite() && *f >= 1.0)) {
            return Err(LabError::usage("awq protect factors must be a non-empty list of values >= 1"));
        }
        for g in &self.budget.grid {
            parse_skip_set(g)?;
        }
        if self.tails.reservoir_cap < 4 {
            return Err(LabError::config("tails reservoir_cap must be at least 4"));
        }
        if self.noise.seeds.is_empty() || self.noise.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(LabError::usage("noise needs at least one seed and non-negative sigmas"));
        }
        Ok(())
    }

    pub fn skip_grid(&self) -> Result<Vec<SkipSet>> {
        self.budget.grid.iter().map(|g| parse_skip_set(g)).collect()
    }

    /// Loads calibration and evaluation chunks and checks they share no
    /// chunk.
    pub fn load_splits(&self, seq_len_max: usize) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
        let chunk = self.data.chunk_len.unwrap_or(seq_len_max);
        if chunk == 0 || chunk > seq_len_max {
            return Err(LabError::config(format!("chunk_len {chunk} must be in 1..={seq_len_max}")));
        }
        let calib = load_split(&self.data.calib, chunk, self.data.calib_max_chunks)?;
        let eval = load_split(&self.data.eval, chunk, self.data.eval_max_chunks)?;
        if calib.is_empty() || eval.is_empty() {
            return Err(LabError::usage("calibration and evaluation splits must be non-empty"));
        }
        check_disjoint(&calib, &eval)?;
        Ok((calib, eval))
    }
}

/// Training run: one configuration, or the matched trio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_run_name")]
    pub name: String,
    /// Held-out split for FP evaluation of the result.
    #[serde(default)]
    pub eval: Option<PathBuf>,
    #[serde(default)]
    pub eval_max_chunks: Option<usize>,
    /// Train the k=0 / k / k+sink trio instead of a single model.
    #[serde(default)]
    pub trio: bool,
    #[serde(default = "default_trio_budget")]
    pub trio_budget_nats: f64,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_run_name() -> String {
    "model".into()
}

fn default_trio_budget() -> f64 {
    0.02
}

impl TrainSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut spec: TrainSpec = toml::from_str(&text).map_err(|e| LabError::config(format!("train spec: {e}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.corpus = resolve(base, &spec.corpus);
        spec.output_dir = resolve(base, &spec.output_dir);
        spec.eval = spec.eval.as_ref().map(|p| resolve(base, p));
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trio {
            if self.train.model.k_registers == 0 {
                return Err(LabError::config("a trio run needs k_registers > 0 in the base model"));
            }
            for (_, c) in crate::train::trio_configs(&self.train, self.train.model.k_registers) {
                c.validate()?;
            }
        } else {
            self.train.validate()?;
        }
        if !(self.trio_budget_nats > 0.0) {
            return Err(LabError::config("trio_budget_nats must be positive"));
        }
        Ok(())
    }
}
