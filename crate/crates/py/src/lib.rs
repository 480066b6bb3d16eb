//! Python bindings: checkpoints, quantization plans, post-hoc folds,
//! diagnostics and training.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use sqlab_core::data;
use sqlab_core::diagnostics::{self, default_grid};
use sqlab_core::harness::verify_suite;
use sqlab_core::model::{self, capture_split, ModelConfig, PreparedModel};
use sqlab_core::posthoc::{self, collect_calib_stats, FoldedModel};
use sqlab_core::quant::{self, Grouping, SkipEntry, SkipGroup};
use sqlab_core::train::{self, TrainConfig};
use sqlab_core::LabError;

create_exception!(sqlab, SqlabError, PyException, "Raised for every lab error; `.args[1]` is the CLI exit code.");

fn err(e: LabError) -> PyErr {
    SqlabError::new_err((e.to_string(), e.exit_code()))
}

type Split = Vec<Vec<u32>>;

#[pyclass(module = "sqlab", from_py_object)]
#[derive(Clone)]
struct Checkpoint {
    inner: model::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        model::Checkpoint::load(&path).map(|inner| Checkpoint { inner }).map_err(err)
    }

    /// Seeded initialisation of the default desk shape; `config_json`
    /// overrides individual config fields.
    #[staticmethod]
    #[pyo3(signature = (k_registers=8, seed=0, config_json=None))]
    fn random_init(k_registers: usize, seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let mut cfg: ModelConfig = match config_json {
            Some(text) => serde_json::from_str(text).map_err(|e| err(LabError::config(e.to_string())))?,
            None => ModelConfig::default(),
        };
        if config_json.is_none() {
            cfg.k_registers = k_registers;
        }
        model::Checkpoint::random_init(&cfg, seed).map(|inner| Checkpoint { inner }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Model configuration as a JSON string.
    #[getter]
    fn config_json(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.config.n_layers
    }

    #[getter]
    fn seq_len_max(&self) -> usize {
        self.inner.config.seq_len_max
    }

    #[getter]
    fn provenance(&self) -> String {
        self.inner.provenance.clone()
    }

    fn manifest(&self) -> String {
        self.inner.manifest_text()
    }

    fn tensor_names(&self) -> Vec<String> {
        self.inner.tensors.keys().cloned().collect()
    }

    /// `(shape, flat row-major values)`.
    fn tensor(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self
            .inner
            .tensors
            .get(name)
            .ok_or_else(|| err(LabError::usage(format!("no tensor named '{name}'"))))?;
        Ok((t.shape.clone(), t.data.clone()))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    /// Mean next-token NLL over the split, optionally under a plan.
    #[pyo3(signature = (split, plan=None))]
    fn nll(&self, split: Split, plan: Option<&QuantPlan>) -> PyResult<f64> {
        model::nll_eval(&split, &self.inner, plan.map(|p| &p.inner)).map_err(err)
    }

    fn logits(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        let l = PreparedModel::fp(&self.inner).and_then(|m| m.logits(&tokens)).map_err(err)?;
        Ok(l.outer_iter().map(|r| r.to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Checkpoint(d_model={}, n_layers={}, k_registers={}, folds={})",
            c.d_model,
            c.n_layers,
            c.k_registers,
            self.inner.folds.len()
        )
    }
}

#[pyclass(module = "sqlab", from_py_object)]
#[derive(Clone)]
struct QuantPlan {
    inner: quant::QuantPlan,
}

#[pymethods]
impl QuantPlan {
    #[staticmethod]
    fn w4a4() -> Self {
        QuantPlan { inner: quant::QuantPlan::w4a4() }
    }

    /// Weight-only plan; `group_size=0` means one group per output row.
    #[staticmethod]
    #[pyo3(signature = (bits=4, group_size=128))]
    fn weight_only(bits: u8, group_size: usize) -> PyResult<Self> {
        let grouping = if group_size == 0 { Grouping::PerChannel } else { Grouping::Group(group_size) };
        let inner = quant::QuantPlan::weight_only(bits, grouping);
        inner.validate().map_err(err)?;
        Ok(QuantPlan { inner })
    }

    #[staticmethod]
    fn full_precision() -> Self {
        QuantPlan { inner: quant::QuantPlan::full_precision() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        quant::QuantPlan::from_toml(text).map(|inner| QuantPlan { inner }).map_err(err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Copy with the named skip groups (`"readers"`, `"o_proj"`, ...) held
    /// at full precision.
    fn with_skip(&self, groups: Vec<String>) -> PyResult<Self> {
        let groups = groups.iter().map(|g| g.parse::<SkipGroup>()).collect::<Result<Vec<_>, _>>().map_err(err)?;
        Ok(QuantPlan { inner: self.inner.clone().with_skip(&groups) })
    }

    fn skipped_groups(&self) -> Vec<String> {
        self.inner
            .skip
            .iter()
            .map(|e| match e {
                SkipEntry::Group(g) => g.name().to_string(),
                SkipEntry::Site(s) => s.to_string(),
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("QuantPlan({})", self.inner.to_toml().replace('\n', "; "))
    }
}

/// A checkpoint with offline folds applied plus the online transforms its
/// plans must carry.
#[pyclass(module = "sqlab")]
struct Folded {
    inner: FoldedModel,
}

#[pymethods]
impl Folded {
    #[getter]
    fn checkpoint(&self) -> Checkpoint {
        Checkpoint { inner: self.inner.checkpoint.clone() }
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    /// NLL under `plan` (full precision when omitted) with this model's
    /// transforms attached.
    #[pyo3(signature = (split, plan=None))]
    fn nll(&self, split: Split, plan: Option<&QuantPlan>) -> PyResult<f64> {
        let base = plan.map(|p| p.inner.clone()).unwrap_or_else(quant::QuantPlan::full_precision);
        self.inner.nll(&base, &split).map_err(err)
    }

    fn plan(&self, base: &QuantPlan) -> QuantPlan {
        QuantPlan { inner: self.inner.plan(&base.inner) }
    }
}

#[pyfunction]
#[pyo3(signature = (ckpt, calib, alpha=0.5, include_generators=false))]
fn smoothquant(ckpt: &Checkpoint, calib: Split, alpha: f64, include_generators: bool) -> PyResult<Folded> {
    let stats = collect_calib_stats(&ckpt.inner, &calib).map_err(err)?;
    posthoc::smoothquant_fold(&ckpt.inner, &stats, alpha, include_generators)
        .map(|inner| Folded { inner })
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (ckpt, calib, fraction=0.05, factor=2.0))]
fn awq(ckpt: &Checkpoint, calib: Split, fraction: f64, factor: f64) -> PyResult<Folded> {
    let stats = collect_calib_stats(&ckpt.inner, &calib).map_err(err)?;
    posthoc::awq_scale(&ckpt.inner, &stats, fraction, factor)
        .map(|inner| Folded { inner })
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (ckpt, seed=1234))]
fn quarot_per_linear(ckpt: &Checkpoint, seed: u64) -> PyResult<Folded> {
    posthoc::quarot_per_linear(&ckpt.inner, seed)
        .and_then(|p| p.install(&ckpt.inner))
        .map(|inner| Folded { inner })
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (ckpt, seed=1234))]
fn quarot_full(ckpt: &Checkpoint, seed: u64) -> PyResult<Folded> {
    posthoc::quarot_full(&ckpt.inner, seed)
        .and_then(|q| q.install())
        .map(|inner| Folded { inner })
        .map_err(err)
}

/// Skip-ablation budget over the default grid; returns the CSV body.
#[pyfunction]
fn budget_csv(ckpt: &Checkpoint, eval: Split) -> PyResult<String> {
    let rep = diagnostics::budget_run(&ckpt.inner, &eval, &default_grid(), &quant::QuantPlan::w4a4()).map_err(err)?;
    Ok(rep.to_csv())
}

/// Per-site kurtosis and severity over a split; returns the CSV body.
#[pyfunction]
#[pyo3(signature = (ckpt, split, reservoir_cap=4096, seed=0))]
fn tails_csv(ckpt: &Checkpoint, split: Split, reservoir_cap: usize, seed: u64) -> PyResult<String> {
    let prepared = PreparedModel::fp(&ckpt.inner).map_err(err)?;
    let res = capture_split(&prepared, &split, reservoir_cap, seed).map_err(err)?;
    let rep = diagnostics::tail_report(&res, ckpt.inner.config.n_layers).map_err(err)?;
    Ok(rep.to_csv())
}

/// The `verify` suite as `(name, passed, detail)` rows.
#[pyfunction]
#[pyo3(signature = (ckpt, seed=0))]
fn verify(ckpt: &Checkpoint, seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    let out = verify_suite(&ckpt.inner, seed).map_err(err)?;
    Ok(out.into_iter().map(|o| (o.name, o.passed, o.detail)).collect())
}

#[pyfunction]
fn excess_kurtosis(values: Vec<f64>) -> PyResult<Option<f64>> {
    diagnostics::excess_kurtosis(&values).map_err(err)
}

/// RTN fake quantization of a `[out, in]` weight given as nested rows.
#[pyfunction]
#[pyo3(signature = (rows, bits=4, group_size=128))]
fn quantize_weight(rows: Vec<Vec<f64>>, bits: u8, group_size: usize) -> PyResult<Vec<Vec<f64>>> {
    let grouping = if group_size == 0 { Grouping::PerChannel } else { Grouping::Group(group_size) };
    let spec = quant::WeightQuantSpec { bits, grouping };
    spec.validate().map_err(err)?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(err(LabError::usage("weight rows must all have the same length")));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let w = ndarray_from(flat, cols)?;
    Ok(quant::quantize_weight_rtn(&w, &spec).outer_iter().map(|r| r.to_vec()).collect())
}

fn ndarray_from(flat: Vec<f64>, cols: usize) -> PyResult<Array2<f64>> {
    let rows = flat.len().checked_div(cols).unwrap_or(0);
    Array2::from_shape_vec((rows, cols), flat)
        .map_err(|e| err(LabError::usage(e.to_string())))
}

/// Per-token activation fake quantization of one row.
#[pyfunction]
#[pyo3(signature = (row, bits=4))]
fn quantize_act(row: Vec<f64>, bits: u8) -> PyResult<Vec<f64>> {
    let spec = quant::ActQuantSpec { bits };
    spec.validate().map_err(err)?;
    Ok(quant::quantize_act_per_token(&row, &spec))
}

#[pyfunction]
fn hadamard(n: usize) -> PyResult<Vec<Vec<f64>>> {
    let h = posthoc::hadamard(n).map_err(err)?;
    Ok(h.outer_iter().map(|r| r.to_vec()).collect())
}

#[pyfunction]
fn random_orthogonal(n: usize, seed: u64) -> Vec<Vec<f64>> {
    posthoc::random_orthogonal(n, seed).outer_iter().map(|r| r.to_vec()).collect()
}

/// Byte-level tokenization into fixed-length chunks (the tail is dropped).
#[pyfunction]
fn chunk_bytes(text: &[u8], chunk_len: usize) -> PyResult<Split> {
    if chunk_len == 0 {
        return Err(err(LabError::usage("chunk_len must be positive")));
    }
    Ok(data::chunk_bytes(text, chunk_len))
}

#[pyfunction]
fn synthetic_text(seed: u64, n_bytes: usize) -> Vec<u8> {
    data::synthetic_text(seed, n_bytes)
}

/// Trains from a TOML training config (the `[train]` table of a train
/// spec) on a byte corpus. Returns the checkpoint and per-step
/// `(step, ce_loss, sink_loss)` records.
#[pyfunction]
#[pyo3(signature = (config_toml, corpus, smoke=false))]
fn train_model(py: Python<'_>, config_toml: &str, corpus: &[u8], smoke: bool) -> PyResult<(Checkpoint, Vec<(usize, f64, f64)>)> {
    let cfg: TrainConfig = if smoke && config_toml.trim().is_empty() {
        TrainConfig::smoke()
    } else {
        toml::from_str(config_toml).map_err(|e| err(LabError::config(format!("train config: {e}"))))?
    };
    let outcome = py.detach(|| train::train(&cfg, corpus, |_| {})).map_err(err)?;
    let trace = outcome.trace.iter().map(|r| (r.step, r.ce_loss, r.sink_loss)).collect();
    Ok((Checkpoint { inner: outcome.checkpoint }, trace))
}

/// Smoke-scale training config as TOML, a starting point for `train_model`.
#[pyfunction]
fn smoke_config_toml() -> String {
    toml::to_string(&TrainConfig::smoke()).expect("config serializes")
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

#[pymodule]
fn sqlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SqlabError", m.py().get_type::<SqlabError>())?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<QuantPlan>()?;
    m.add_class::<Folded>()?;
    m.add_function(wrap_pyfunction!(smoothquant, m)?)?;
    m.add_function(wrap_pyfunction!(awq, m)?)?;
    m.add_function(wrap_pyfunction!(quarot_per_linear, m)?)?;
    m.add_function(wrap_pyfunction!(quarot_full, m)?)?;
    m.add_function(wrap_pyfunction!(budget_csv, m)?)?;
    m.add_function(wrap_pyfunction!(tails_csv, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(excess_kurtosis, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_weight, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_act, m)?)?;
    m.add_function(wrap_pyfunction!(hadamard, m)?)?;
    m.add_function(wrap_pyfunction!(random_orthogonal, m)?)?;
    m.add_function(wrap_pyfunction!(chunk_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_text, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(smoke_config_toml, m)?)?;
    m.add_function(wrap_pyfunction!(version, m)?)?;
    Ok(())
}
