//! Property suites shared by `verify` and the acceptance tests. Each check
//! returns a named pass/fail outcome with a short detail string.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::synthetic_text;
use crate::diagnostics::{
    aggregate_bound_holds, budget_run, default_grid, excess_kurtosis, fourth_moment_identity_check,
    norm_bound_holds, tail_report,
};
use crate::error::Result;
use crate::model::{Checkpoint, Linear, ModelConfig, PreparedModel, Reservoir, SiteId};
use crate::posthoc::rotation::orthogonality_error;
use crate::posthoc::{
    awq_scale, collect_calib_stats, hadamard, quarot_full, quarot_per_linear, random_orthogonal,
    randomized_hadamard, smoothquant_fold,
};
use crate::quant::rtn::{quantize_act_per_token, quantize_weight_rtn, ActQuantSpec, Grouping, WeightQuantSpec};
use crate::quant::QuantPlan;
use crate::seeds::rng_for;
use crate::train::{grad_check, probe_params, SinkSettings};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

pub fn render_table(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(4);
    let mut out = String::new();
    for o in outcomes {
        let _ = writeln!(
            out,
            "{:<width$}  {}  {}",
            o.name,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    out
}

/// Byte chunks from the synthetic generator, folded into the vocabulary.
pub fn probe_split(cfg: &ModelConfig, n_chunks: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let len = len.min(cfg.seq_len_max);
    let bytes = synthetic_text(seed, n_chunks * len);
    bytes
        .chunks_exact(len)
        .map(|c| c.iter().map(|&b| b as u32 % cfg.vocab_size as u32).collect())
        .collect()
}

fn random_vector(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<f64> {
    let n = rng.random_range(1..=max_len);
    if rng.random_bool(0.02) {
        return vec![0.0; n];
    }
    let scale = 10f64.powf(rng.random_range(-3.0..3.0));
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            // Occasional exact zeros and large spikes.
            match rng.random_range(0..20) {
                0 => 0.0,
                1 => z * scale * 50.0,
                _ => z * scale,
            }
        })
        .collect()
}

fn absmax(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// RTN idempotence, the half-step error bound, per-token power-of-two scale
/// equivariance and zero-row safety, `cases` random cases each.
pub fn check_quantizers(cases: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut rng = rng_for(seed, "verify_quant", &[]);
    let act = ActQuantSpec::int4();
    let (mut idem, mut bound, mut equiv, mut zero) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..cases {
        let v = random_vector(&mut rng, 96);
        let n = v.len();
        let g = [1usize, 3, 8, 32, 128][rng.random_range(0..5)];
        let bits = if rng.random_bool(0.5) { 4 } else { 8 };
        let spec = WeightQuantSpec {
            bits,
            grouping: if rng.random_bool(0.2) { Grouping::PerChannel } else { Grouping::Group(g) },
        };
        let w = Array2::from_shape_vec((1, n), v.clone()).expect("shape");
        let q = quantize_weight_rtn(&w, &spec);
        let qa = quantize_act_per_token(&v, &act);
        if quantize_weight_rtn(&q, &spec) != q || quantize_act_per_token(&qa, &act) != qa {
            idem += 1;
        }
        let group = match spec.grouping {
            Grouping::PerChannel => n,
            Grouping::Group(g) => g,
        };
        let q = q.as_slice().expect("standard layout");
        for (chunk, qc) in v.chunks(group).zip(q.chunks(group)) {
            let s = absmax(chunk) / spec.qmax();
            if chunk.iter().zip(qc).any(|(a, b)| (a - b).abs() > s / 2.0 * (1.0 + 1e-12)) {
                bound += 1;
            }
        }
        // Per-token codes never clip: |a| <= max gives codes in [-7, 7].
        let s = absmax(&v) / act.clip_hi();
        if v.iter().zip(&qa).any(|(a, b)| (a - b).abs() > s / 2.0 * (1.0 + 1e-12)) {
            bound += 1;
        }
        let c = 2f64.powi(rng.random_range(-8..8));
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        let expect: Vec<f64> = qa.iter().map(|x| x * c).collect();
        if quantize_act_per_token(&scaled, &act) != expect {
            equiv += 1;
        }
        let zeros = vec![0.0; n];
        let zw = quantize_weight_rtn(&Array2::zeros((2, n)), &spec);
        if quantize_act_per_token(&zeros, &act) != zeros || zw.iter().any(|&x| x != 0.0) {
            zero += 1;
        }
    }
    let mk = |name: &str, fails: usize| CheckOutcome::new(name, fails == 0, format!("{fails} failures / {cases} cases"));
    vec![
        mk("quant.idempotence", idem),
        mk("quant.half_step_bound", bound),
        mk("quant.scale_equivariance", equiv),
        mk("quant.zero_rows", zero),
    ]
}

/// Orthogonality of the generators and of both rotation plans for `cfg`.
pub fn check_rotations(cfg: &ModelConfig, seed: u64) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for n in [1usize, 2, 4, 8, 16, 32, 64, 128] {
        worst = worst.max(orthogonality_error(&hadamard(n)?));
        worst = worst.max(orthogonality_error(&randomized_hadamard(n, seed)?));
    }
    for n in [3usize, 24, 64, 120, 344] {
        worst = worst.max(orthogonality_error(&random_orthogonal(n, seed)));
    }
    let ckpt = Checkpoint::random_init(cfg, seed)?;
    let mut specs: Vec<_> = quarot_per_linear(&ckpt, seed)?.site_rotations;
    let full = quarot_full(&ckpt, seed)?;
    specs.extend(full.plan.site_rotations.iter().cloned());
    for sr in &specs {
        worst = worst.max(orthogonality_error(&sr.rotation.materialize()?));
    }
    let r = full.plan.residual.as_ref().expect("full plan").matrix()?;
    worst = worst.max(orthogonality_error(&r));
    Ok(CheckOutcome::new(
        "rotation.orthogonality",
        worst < 1e-6,
        format!("max |QᵀQ - I| = {worst:.2e}"),
    ))
}

/// Full-precision NLL before and after every offline fold.
pub fn check_fold_invariance(ckpt: &Checkpoint, calib: &[Vec<u32>], eval: &[Vec<u32>], seed: u64) -> Result<Vec<CheckOutcome>> {
    let fp = PreparedModel::fp(ckpt)?.nll(eval)?;
    let stats = collect_calib_stats(ckpt, calib)?;
    let none = QuantPlan::full_precision();
    let min_width = ckpt.config.d_model.min(ckpt.config.d_inner) as f64;
    let fraction = 0.05f64.max(1.0 / min_width);
    let mut out = Vec::new();
    let mut push = |name: &str, nll: f64, tol: f64| {
        let d = (nll - fp).abs();
        out.push(CheckOutcome::new(name, d < tol, format!("|dNLL| = {d:.2e} (tol {tol:e})")));
    };
    push("fold.smoothquant", smoothquant_fold(ckpt, &stats, 0.5, false)?.nll(&none, eval)?, 1e-5);
    push("fold.smoothquant_all_sites", smoothquant_fold(ckpt, &stats, 0.5, true)?.nll(&none, eval)?, 1e-5);
    push("fold.awq", awq_scale(ckpt, &stats, fraction, 4.0)?.nll(&none, eval)?, 1e-5);
    push(
        "fold.quarot_per_linear",
        quarot_per_linear(ckpt, seed)?.install(ckpt)?.nll(&none, eval)?,
        1e-4,
    );
    let full = quarot_full(ckpt, seed)?;
    push("fold.quarot_full_offline", PreparedModel::fp(&full.checkpoint)?.nll(eval)?, 1e-4);
    push("fold.quarot_full_online", full.install()?.nll(&none, eval)?, 1e-4);
    Ok(out)
}

/// Fourth-moment identity on `pairs` random sample pairs.
pub fn check_fourth_moment(pairs: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = rng_for(seed, "verify_fourth", &[]);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let n = rng.random_range(2..200);
        let u: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mix = rng.random_range(-1.0..1.0);
        let v: Vec<f64> = u
            .iter()
            .map(|x| mix * x + rng.random_range(-2.0..2.0) * if rng.random_bool(0.05) { 20.0 } else { 1.0 })
            .collect();
        worst = worst.max(fourth_moment_identity_check(&u, &v)?);
    }
    Ok(CheckOutcome::new(
        "identity.fourth_moment",
        worst <= 1e-10,
        format!("max relative residual {worst:.2e} over {pairs} pairs"),
    ))
}

/// Reader bound through the partitioned norm on random instances.
pub fn check_norm_bound(instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = rng_for(seed, "verify_norm_bound", &[]);
    let mut fails = 0;
    for _ in 0..instances {
        let d = rng.random_range(2..160);
        let k = rng.random_range(0..d);
        let scale = 10f64.powf(rng.random_range(-4.0..4.0));
        let x: Vec<f64> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale * if rng.random_bool(0.02) { 100.0 } else { 1.0 }
            })
            .collect();
        let gs: Vec<f64> = (0..d - k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gr: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let eps = 10f64.powf(rng.random_range(-8.0..-2.0));
        if !norm_bound_holds(&x, &gs, &gr, k, eps)? {
            fails += 1;
        }
    }
    Ok(CheckOutcome::new(
        "bound.reader_norm",
        fails == 0,
        format!("{fails} violations / {instances} instances"),
    ))
}

/// Generator-input bound for attention-style aggregates.
pub fn check_aggregate_bound(instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = rng_for(seed, "verify_agg_bound", &[]);
    let mut fails = 0;
    for _ in 0..instances {
        let (t, din, dout) = (rng.random_range(1..32), rng.random_range(1..48), rng.random_range(1..48));
        let w = Array2::from_shape_simple_fn((dout, din), || -> f64 { StandardNormal.sample(&mut rng) });
        let xs = Array2::from_shape_simple_fn((t, din), || -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * 10f64.powf(rng.random_range(-2.0..2.0))
        });
        let raw: Vec<f64> = (0..t).map(|_| rng.random_range(-4.0..4.0f64).exp()).collect();
        let sum: f64 = raw.iter().sum();
        let alpha: Vec<f64> = raw.iter().map(|a| a / sum).collect();
        if !aggregate_bound_holds(&w, &alpha, &xs, 1e-12)? {
            fails += 1;
        }
    }
    Ok(CheckOutcome::new(
        "bound.generator_aggregate",
        fails == 0,
        format!("{fails} violations / {instances} instances"),
    ))
}

/// Kurtosis estimator calibration and planted-tail recovery.
pub fn check_tail_statistics(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = rng_for(seed, "verify_kurtosis", &[]);
    let gauss: Vec<f64> = (0..1_000_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let kg = excess_kurtosis(&gauss)?.unwrap_or(f64::NAN);
    let rad: Vec<f64> = (0..10_000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let kr = excess_kurtosis(&rad)?;
    let constant = excess_kurtosis(&[2.5; 100])?;

    let n_layers = 2;
    let mut res: BTreeMap<SiteId, Reservoir> = BTreeMap::new();
    let target = SiteId::new(1, Linear::W2);
    for site in SiteId::all(n_layers) {
        let rows = (0..20_000)
            .map(|_| {
                let mut r: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
                if site == target && rng.random_bool(0.002) {
                    r[11] *= 100.0;
                }
                r
            })
            .collect();
        res.insert(site, Reservoir::from_rows(rows));
    }
    let rep = tail_report(&res, n_layers)?;
    let planted = rep.sites[&target].kurt_max.unwrap_or(0.0);
    let clean: Vec<f64> = rep
        .sites
        .iter()
        .filter(|(s, _)| **s != target)
        .filter_map(|(_, t)| t.kurt_max)
        .collect();
    let clean_max = clean.iter().fold(0.0f64, |m, k| m.max(k.abs()));
    let clean_median = crate::diagnostics::lower_median(&clean).unwrap_or(0.0).abs();
    let found = rep.sites[&target].kurt_max_channel == Some(11)
        && rep
            .sites
            .iter()
            .max_by(|a, b| a.1.kurt_max.unwrap_or(f64::MIN).total_cmp(&b.1.kurt_max.unwrap_or(f64::MIN)))
            .map(|(s, _)| *s)
            == Some(target);
    Ok(vec![
        CheckOutcome::new("kurtosis.gaussian", kg.abs() <= 0.05, format!("1e6 samples: {kg:+.4}")),
        CheckOutcome::new("kurtosis.rademacher", kr == Some(-2.0), format!("{kr:?}")),
        CheckOutcome::new("kurtosis.constant_flagged", constant.is_none(), format!("{constant:?}")),
        CheckOutcome::new(
            "tails.planted_channel",
            found && planted >= 10.0 * clean_max && planted >= 10.0 * clean_median,
            format!("planted {planted:.1}, clean max |k| {clean_max:.3}, clean median |k| {clean_median:.3}"),
        ),
    ])
}

/// Budget identities on one checkpoint.
pub fn check_budget(ckpt: &Checkpoint, eval: &[Vec<u32>]) -> Result<CheckOutcome> {
    let rep = budget_run(ckpt, eval, &default_grid(), &QuantPlan::w4a4())?;
    let all_zero = rep.row("skip_all").map(|r| r.delta_nll) == Some(0.0);
    Ok(CheckOutcome::new(
        "budget.identities",
        rep.identities_hold() && all_zero,
        format!("naive excess {:.6} nats, skip-all {:?}", rep.naive_delta, rep.row("skip_all").map(|r| r.delta_nll)),
    ))
}

/// Finite-difference gradient check on tiny models, with and without
/// registers and hinge.
pub fn check_gradients(seed: u64) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    let mut hinge_tokens = 0;
    let mut probes = 0;
    for (k, ch, every) in [(0usize, 0usize, false), (2, 2, false), (2, 2, true), (0, 2, false)] {
        let cfg = ModelConfig::tiny(k);
        let params = probe_params(&cfg, seed);
        let batch = probe_split(&cfg, 2, 8, seed);
        let sink = if ch == 0 {
            SinkSettings::disabled()
        } else {
            SinkSettings {
                lambda: 0.5,
                tau: 0.3,
                channels: ch,
                every_block: every,
            }
        };
        let r = grad_check(&cfg, &params, &batch, &sink, 6, 1e-5, seed)?;
        worst = worst.max(r.max_rel_error);
        hinge_tokens += r.active_hinge_tokens;
        probes += r.probes;
    }
    Ok(CheckOutcome::new(
        "train.grad_check",
        worst < 1e-4 && hinge_tokens > 0,
        format!("max rel error {worst:.2e} over {probes} probes, {hinge_tokens} active hinge tokens"),
    ))
}

/// The `verify` command's suite for one checkpoint.
pub fn verify_suite(ckpt: &Checkpoint, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    if let Err(e) = ckpt.validate() {
        out.push(CheckOutcome::new("checkpoint.valid", false, e.to_string()));
        return Ok(out);
    }
    out.push(CheckOutcome::new(
        "checkpoint.valid",
        true,
        format!("{} tensors", ckpt.tensors.len()),
    ));
    let cfg = &ckpt.config;
    let split = probe_split(cfg, 8, 64, seed);
    let (calib, eval) = split.split_at(4);
    out.extend(check_quantizers(2_000, seed));
    out.push(check_rotations(cfg, seed)?);
    out.extend(check_fold_invariance(ckpt, calib, eval, seed)?);
    out.push(check_fourth_moment(1_000, seed)?);
    out.push(check_norm_bound(1_000, seed)?);
    out.push(check_aggregate_bound(1_000, seed)?);
    out.push(check_budget(ckpt, eval)?);
    out.push(check_gradients(seed)?);
    Ok(out)
}
