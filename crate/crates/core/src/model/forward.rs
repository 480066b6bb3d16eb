//! Inference forward pass with per-site interception: transforms, capture
//! and fake quantization at each of the five input-activation sites.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::checkpoint::Checkpoint;
use super::config::ModelConfig;
use super::ops::{causal_attention, log_softmax, rmsnorm_rows, silu, RopeTable};
use super::params::Params;
use super::site::{Linear, SiteId};
use crate::error::{LabError, Result};
use crate::quant::plan::{QuantPlan, Transform};
use crate::quant::rtn::{quantize_act_rows, quantize_weight_rtn, ActQuantSpec};
use crate::seeds::{derive_seed, rng_for};

/// Receives the rows fed to each site's linear (after transforms, before
/// activation quantization) and optionally the pre-block residual stream.
pub trait SiteObserver {
    fn observe(&mut self, site: SiteId, rows: ArrayView2<f64>);

    fn observe_residual(&mut self, _layer: usize, _rows: ArrayView2<f64>) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl SiteObserver for NoObserver {
    fn observe(&mut self, _site: SiteId, _rows: ArrayView2<f64>) {}
}

#[derive(Debug, Clone)]
enum PreparedTransform {
    Scale(Vec<f64>),
    /// Stored transposed so that rows map as `x -> x Qᵀ`.
    Rotation(Array2<f64>),
    Noise { std: Vec<f64>, seed: u64 },
}

#[derive(Debug, Clone, Default)]
struct SitePrep {
    transforms: Vec<PreparedTransform>,
    act: Option<ActQuantSpec>,
}

/// A checkpoint with a quantization plan installed: weights of quantized
/// sites are pre-quantized once, activation quantizers and transforms are
/// attached per site.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    config: ModelConfig,
    params: Params,
    sites: Vec<SitePrep>,
    rope: RopeTable,
}

fn site_index(site: SiteId) -> usize {
    site.layer * 5 + Linear::ALL.iter().position(|&l| l == site.linear).expect("known linear")
}

impl PreparedModel {
    /// Full-precision model with nothing attached.
    pub fn fp(ckpt: &Checkpoint) -> Result<Self> {
        Self::from_params(ckpt.config.clone(), ckpt.to_params()?, None)
    }

    pub fn new(ckpt: &Checkpoint, plan: Option<&QuantPlan>) -> Result<Self> {
        Self::from_params(ckpt.config.clone(), ckpt.to_params()?, plan)
    }

    pub fn from_params(config: ModelConfig, mut params: Params, plan: Option<&QuantPlan>) -> Result<Self> {
        config.validate()?;
        let n_sites = config.n_layers * 5;
        let mut sites = vec![SitePrep::default(); n_sites];
        if let Some(plan) = plan {
            plan.validate()?;
            for entry in &plan.skip {
                if let crate::quant::plan::SkipEntry::Site(site) = entry {
                    if site.layer >= config.n_layers {
                        return Err(LabError::config(format!("skip entry names unknown site {site}")));
                    }
                }
            }
            for t in &plan.transforms {
                if t.site.layer >= config.n_layers {
                    return Err(LabError::config(format!("transform attached to unknown site {}", t.site)));
                }
            }
            for site in SiteId::all(config.n_layers) {
                let in_dim = site.linear.in_dim(config.d_model, config.d_inner);
                let prep = &mut sites[site_index(site)];
                for t in plan.transforms_for(site) {
                    if t.dim() != in_dim {
                        return Err(LabError::config(format!(
                            "transform on {site} has width {}, site input width is {in_dim}",
                            t.dim()
                        )));
                    }
                    prep.transforms.push(match t {
                        Transform::InputScale { divisor } => {
                            if divisor.iter().any(|v| !(v.is_finite() && *v != 0.0)) {
                                return Err(LabError::config(format!("input scale on {site} has a zero or non-finite entry")));
                            }
                            PreparedTransform::Scale(divisor.clone())
                        }
                        Transform::Rotation { rotation } => {
                            PreparedTransform::Rotation(rotation.materialize()?.reversed_axes())
                        }
                        Transform::Noise { std, seed } => PreparedTransform::Noise {
                            std: std.clone(),
                            seed: *seed,
                        },
                    });
                }
                if plan.is_skipped(site) {
                    continue;
                }
                prep.act = plan.act;
                if let Some(wspec) = &plan.weight {
                    let w = params.layers[site.layer].weight_mut(site.linear);
                    *w = quantize_weight_rtn(w, wspec);
                }
            }
        }
        let rope = RopeTable::new(config.seq_len_max, config.head_dim, config.rope_base);
        Ok(PreparedModel {
            config,
            params,
            sites,
            rope,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Effective (possibly quantized) parameters.
    pub fn params(&self) -> &Params {
        &self.params
    }

    fn site_input(
        &self,
        site: SiteId,
        rows: Array2<f64>,
        stream: u64,
        obs: &mut dyn SiteObserver,
    ) -> Array2<f64> {
        let prep = &self.sites[site_index(site)];
        let mut x = rows;
        for t in &prep.transforms {
            match t {
                PreparedTransform::Scale(div) => {
                    for mut row in x.outer_iter_mut() {
                        for (v, s) in row.iter_mut().zip(div) {
                            *v /= s;
                        }
                    }
                }
                PreparedTransform::Rotation(qt) => x = x.dot(qt),
                PreparedTransform::Noise { std, seed } => {
                    let li = Linear::ALL.iter().position(|&l| l == site.linear).unwrap_or(0) as u64;
                    let mut rng: ChaCha8Rng = rng_for(*seed, "noise", &[site.layer as u64, li, stream]);
                    for mut row in x.outer_iter_mut() {
                        for (v, s) in row.iter_mut().zip(std) {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            *v += s * z;
                        }
                    }
                }
            }
        }
        obs.observe(site, x.view());
        if let Some(act) = &prep.act {
            quantize_act_rows(&mut x, act);
        }
        x
    }

    fn linear(&self, site: SiteId, x: &Array2<f64>) -> Result<Array2<f64>> {
        let w = self.params.layers[site.layer].weight(site.linear);
        let y = x.dot(&w.t());
        if y.iter().any(|v| !v.is_finite()) {
            return Err(LabError::numeric(site.to_string(), "non-finite linear output"));
        }
        Ok(y)
    }

    /// Logits `[T, vocab]` for one sequence. `stream` keys the noise
    /// generators so that distinct sequences draw distinct noise.
    pub fn forward_observed(
        &self,
        tokens: &[u32],
        stream: u64,
        obs: &mut dyn SiteObserver,
    ) -> Result<Array2<f64>> {
        let cfg = &self.config;
        let t = tokens.len();
        if t == 0 || t > cfg.seq_len_max {
            return Err(LabError::usage(format!(
                "sequence length {t} outside 1..={}",
                cfg.seq_len_max
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&tok| tok as usize >= cfg.vocab_size) {
            return Err(LabError::usage(format!("token id {bad} >= vocab size {}", cfg.vocab_size)));
        }
        let (k, eps) = (cfg.k_registers, cfg.norm_eps);
        let mut x = Array2::zeros((t, cfg.d_model));
        for (mut row, &tok) in x.outer_iter_mut().zip(tokens) {
            row.assign(&self.params.embed.row(tok as usize));
        }
        for (l, lp) in self.params.layers.iter().enumerate() {
            obs.observe_residual(l, x.view());
            let xn = rmsnorm_rows(x.view(), lp.gamma1.view(), k, eps);
            let site = SiteId::new(l, Linear::Qkv);
            let a = self.site_input(site, xn, stream, obs);
            let qkv = self.linear(site, &a)?;
            let att = causal_attention(qkv.view(), cfg.n_heads, cfg.head_dim, &self.rope, false);
            let site = SiteId::new(l, Linear::OProj);
            let a = self.site_input(site, att.o_input, stream, obs);
            x += &self.linear(site, &a)?;

            let xn = rmsnorm_rows(x.view(), lp.gamma2.view(), k, eps);
            let a1 = self.site_input(SiteId::new(l, Linear::W1), xn.clone(), stream, obs);
            let a3 = self.site_input(SiteId::new(l, Linear::W3), xn, stream, obs);
            let mut h = self.linear(SiteId::new(l, Linear::W1), &a1)?;
            let v = self.linear(SiteId::new(l, Linear::W3), &a3)?;
            h.zip_mut_with(&v, |u, &vv| *u = silu(*u) * vv);
            let site = SiteId::new(l, Linear::W2);
            if h.iter().any(|z| !z.is_finite()) {
                return Err(LabError::numeric(site.to_string(), "non-finite SwiGLU product"));
            }
            let a = self.site_input(site, h, stream, obs);
            x += &self.linear(site, &a)?;
        }
        obs.observe_residual(cfg.n_layers, x.view());
        let xf = rmsnorm_rows(x.view(), self.params.gamma_final.view(), k, eps);
        let logits = xf.dot(&self.params.head_matrix().t());
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(LabError::numeric("head", "non-finite logits"));
        }
        Ok(logits)
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        self.forward_observed(tokens, 0, &mut NoObserver)
    }

    /// Forward with optional reservoir capture and residual snapshots.
    pub fn forward(&self, tokens: &[u32], capture: &CaptureSpec) -> Result<ForwardTrace> {
        let mut rec = TraceRecorder::new(self.config.n_layers, capture);
        let logits = self.forward_observed(tokens, 0, &mut rec)?;
        Ok(rec.finish(logits))
    }

    /// Sum of next-token NLL (nats) and the number of predicted tokens.
    pub fn sequence_nll(&self, tokens: &[u32], stream: u64, obs: &mut dyn SiteObserver) -> Result<(f64, usize)> {
        if tokens.len() < 2 {
            return Ok((0.0, 0));
        }
        let logits = self.forward_observed(tokens, stream, obs)?;
        Ok(nll_from_logits(&logits, tokens))
    }

    /// Mean next-token NLL over a split, FP64 accumulation in chunk order.
    pub fn nll(&self, split: &[Vec<u32>]) -> Result<f64> {
        self.nll_observed(split, &mut NoObserver)
    }

    pub fn nll_observed(&self, split: &[Vec<u32>], obs: &mut dyn SiteObserver) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, chunk) in split.iter().enumerate() {
            let (s, c) = self.sequence_nll(chunk, i as u64, obs)?;
            total += s;
            count += c;
        }
        if count == 0 {
            return Err(LabError::usage("evaluation split has no predictable tokens"));
        }
        Ok(total / count as f64)
    }
}

/// `(sum of -log p(token[t+1] | prefix), count)` for one sequence.
pub fn nll_from_logits(logits: &Array2<f64>, tokens: &[u32]) -> (f64, usize) {
    let mut sum = 0.0;
    for (t, row) in logits.axis_iter(Axis(0)).take(tokens.len() - 1).enumerate() {
        let lp = log_softmax(row);
        sum -= lp[tokens[t + 1] as usize];
    }
    (sum, tokens.len() - 1)
}

/// Convenience wrapper: prepare `ckpt` with `plan` and evaluate mean NLL.
pub fn nll_eval(split: &[Vec<u32>], ckpt: &Checkpoint, plan: Option<&QuantPlan>) -> Result<f64> {
    if split.is_empty() {
        return Err(LabError::usage("evaluation split is empty"));
    }
    PreparedModel::new(ckpt, plan)?.nll(split)
}

/// Convenience wrapper around [`PreparedModel::forward`].
pub fn forward(
    tokens: &[u32],
    ckpt: &Checkpoint,
    plan: Option<&QuantPlan>,
    capture: &CaptureSpec,
) -> Result<ForwardTrace> {
    PreparedModel::new(ckpt, plan)?.forward(tokens, capture)
}

/// Uniform reservoir sample (algorithm R) of the rows seen at one site.
#[derive(Debug, Clone)]
pub struct Reservoir {
    cap: usize,
    seen: u64,
    rows: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    pub fn new(cap: usize, seed: u64) -> Self {
        Reservoir {
            cap,
            seen: 0,
            rows: Vec::new(),
            rng: rng_for(seed, "reservoir", &[]),
        }
    }

    /// Reservoir pre-filled with the given rows (synthetic traces in tests).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let mut r = Reservoir::new(rows.len().max(1), 0);
        r.seen = rows.len() as u64;
        r.rows = rows;
        r
    }

    pub fn push(&mut self, row: &[f64]) {
        if self.rows.len() < self.cap {
            self.rows.push(row.to_vec());
        } else if self.cap > 0 {
            let j = self.rng.random_range(0..=self.seen);
            if (j as usize) < self.cap {
                self.rows[j as usize] = row.to_vec();
            }
        }
        self.seen += 1;
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct CaptureSpec {
    /// Per-site reservoir capacity; `None` disables site capture.
    pub reservoir_cap: Option<usize>,
    pub seed: u64,
    /// Keep the residual stream before every block (and after the last).
    pub residuals: bool,
}

impl CaptureSpec {
    pub const DEFAULT_CAP: usize = 65_536;

    pub fn off() -> Self {
        CaptureSpec {
            reservoir_cap: None,
            seed: 0,
            residuals: false,
        }
    }

    pub fn sites(cap: usize, seed: u64) -> Self {
        CaptureSpec {
            reservoir_cap: Some(cap),
            seed,
            residuals: false,
        }
    }
}

/// Output of a forward pass with capture.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Array2<f64>,
    pub captured: BTreeMap<SiteId, Reservoir>,
    pub residual_snapshots: Option<Vec<Array2<f64>>>,
}

/// Observer that fills per-site reservoirs (and residual snapshots);
/// deterministic given its seed and the order rows arrive in.
pub struct TraceRecorder {
    pub reservoirs: BTreeMap<SiteId, Reservoir>,
    residuals: Option<Vec<Array2<f64>>>,
}

impl TraceRecorder {
    pub fn new(n_layers: usize, capture: &CaptureSpec) -> Self {
        let reservoirs = match capture.reservoir_cap {
            Some(cap) => SiteId::all(n_layers)
                .into_iter()
                .map(|s| {
                    let li = site_index(s) as u64;
                    (s, Reservoir::new(cap, derive_seed(capture.seed, "capture", &[li])))
                })
                .collect(),
            None => BTreeMap::new(),
        };
        TraceRecorder {
            reservoirs,
            residuals: capture.residuals.then(Vec::new),
        }
    }

    pub fn finish(self, logits: Array2<f64>) -> ForwardTrace {
        ForwardTrace {
            logits,
            captured: self.reservoirs,
            residual_snapshots: self.residuals,
        }
    }
}

impl SiteObserver for TraceRecorder {
    fn observe(&mut self, site: SiteId, rows: ArrayView2<f64>) {
        if let Some(r) = self.reservoirs.get_mut(&site) {
            for row in rows.outer_iter() {
                r.push(row.as_slice().expect("standard layout"));
            }
        }
    }

    fn observe_residual(&mut self, _layer: usize, rows: ArrayView2<f64>) {
        if let Some(v) = &mut self.residuals {
            v.push(rows.to_owned());
        }
    }
}

/// Captures reservoirs over a whole split, sequences in order.
pub fn capture_split(
    prepared: &PreparedModel,
    split: &[Vec<u32>],
    cap: usize,
    seed: u64,
) -> Result<BTreeMap<SiteId, Reservoir>> {
    let mut rec = TraceRecorder::new(prepared.config().n_layers, &CaptureSpec::sites(cap, seed));
    for (i, chunk) in split.iter().enumerate() {
        prepared.forward_observed(chunk, i as u64, &mut rec)?;
    }
    Ok(rec.reservoirs)
}

/// Register slice `[T, k]` of a residual snapshot.
pub fn register_rows(residual: &Array2<f64>, k: usize) -> Array2<f64> {
    let d = residual.ncols();
    residual.slice(s![.., d - k..]).to_owned()
}
