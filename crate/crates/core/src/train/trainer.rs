//! Desk-scale pretraining loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adamw::{clip_grad_norm, AdamW};
use super::backward::{loss_and_grad, SinkSettings};
use super::schedule::LrSchedule;
use crate::data::chunk_bytes;
use crate::error::{LabError, Result};
use crate::model::{Checkpoint, ModelConfig, Params, PreparedModel};
use crate::seeds::{derive_seed, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_tokens: usize,
    /// Training chunk length; defaults to the model's `seq_len_max`.
    pub seq_len: Option<usize>,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_tokens: u64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub sink_enabled: bool,
    pub sink_lambda: f64,
    pub sink_tau: f64,
    /// Apply the hinge at every block input, not only before the first.
    pub sink_every_block: bool,
    /// Hinge on this many trailing channels of a plain-RMSNorm model
    /// (`k_registers = 0`); the partition-free control arm.
    pub sink_channels_override: Option<usize>,
    #[serde(with = "crate::seeds::seed_serde")]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk_full()
    }
}

impl TrainConfig {
    /// Desk "full" run: 20k steps of 8192 tokens.
    pub fn desk_full() -> Self {
        let model = ModelConfig::default();
        let steps = 20_000;
        let batch_tokens = 8192;
        TrainConfig {
            model,
            steps,
            batch_tokens,
            seq_len: None,
            peak_lr: 2e-3,
            min_lr: 2e-4,
            warmup_tokens: (steps * batch_tokens) as u64 * 12 / 1000,
            betas: [0.9, 0.95],
            weight_decay: 0.1,
            grad_clip: 1.0,
            sink_enabled: true,
            sink_lambda: 0.01,
            sink_tau: 3.0,
            sink_every_block: false,
            sink_channels_override: None,
            seed: 0,
        }
    }

    /// 200-step smoke configuration for CI.
    pub fn smoke() -> Self {
        let mut cfg = TrainConfig::desk_full();
        cfg.model.n_layers = 2;
        cfg.model.d_model = 64;
        cfg.model.n_heads = 2;
        cfg.model.d_inner = 172;
        cfg.model.k_registers = 4;
        cfg.model.seq_len_max = 64;
        cfg.steps = 200;
        cfg.batch_tokens = 512;
        cfg.peak_lr = 3e-3;
        cfg.min_lr = 3e-4;
        cfg.warmup_tokens = 200 * 512 / 20;
        cfg
    }

    pub fn total_tokens(&self) -> u64 {
        (self.steps * self.batch_tokens) as u64
    }

    pub fn chunk_len(&self) -> usize {
        self.seq_len.unwrap_or(self.model.seq_len_max)
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.peak_lr,
            min_lr: self.min_lr,
            warmup_tokens: self.warmup_tokens,
            total_tokens: self.total_tokens(),
        }
    }

    pub fn sink_settings(&self) -> Result<SinkSettings> {
        if !self.sink_enabled {
            return Ok(SinkSettings::disabled());
        }
        let channels = match (self.model.k_registers, self.sink_channels_override) {
            (0, None) => {
                return Err(LabError::config(
                    "sink loss enabled with k_registers = 0; set sink_channels_override for the plain-norm arm",
                ))
            }
            (0, Some(c)) => c,
            (k, None) => k,
            (k, Some(c)) if c == k => k,
            (k, Some(c)) => {
                return Err(LabError::config(format!(
                    "sink_channels_override ({c}) conflicts with k_registers ({k})"
                )))
            }
        };
        if channels == 0 || channels >= self.model.d_model {
            return Err(LabError::config("sink channel count must be in 1..d_model"));
        }
        Ok(SinkSettings {
            lambda: self.sink_lambda,
            tau: self.sink_tau,
            channels,
            every_block: self.sink_every_block,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(LabError::config("steps must be at least 1"));
        }
        let chunk = self.chunk_len();
        if chunk < 2 || chunk > self.model.seq_len_max {
            return Err(LabError::config(format!(
                "seq_len {chunk} must be in 2..={}",
                self.model.seq_len_max
            )));
        }
        if self.batch_tokens < chunk || !self.batch_tokens.is_multiple_of(chunk) {
            return Err(LabError::config("batch_tokens must be a positive multiple of seq_len"));
        }
        if self.warmup_tokens > self.total_tokens() {
            return Err(LabError::config("warmup_tokens exceeds the total token budget"));
        }
        if !(self.peak_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return Err(LabError::config("need 0 <= min_lr <= peak_lr and peak_lr > 0"));
        }
        if self.sink_lambda < 0.0 || !(self.sink_tau > 0.0) {
            return Err(LabError::config("need sink_lambda >= 0 and sink_tau > 0"));
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return Err(LabError::config("grad_clip must be positive and weight_decay non-negative"));
        }
        self.sink_settings()?;
        Ok(())
    }

    pub fn provenance(&self) -> String {
        format!(
            "seed={} steps={} batch_tokens={} k={} sink_enabled={} sink_lambda={} sink_tau={} sink_every_block={} sink_channels_override={:?}",
            self.seed,
            self.steps,
            self.batch_tokens,
            self.model.k_registers,
            self.sink_enabled,
            self.sink_lambda,
            self.sink_tau,
            self.sink_every_block,
            self.sink_channels_override
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub tokens: u64,
    pub ce_loss: f64,
    pub sink_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from("step,tokens,ce_loss,sink_loss,lr,grad_norm\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?}",
            r.step, r.tokens, r.ce_loss, r.sink_loss, r.lr, r.grad_norm
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<LossRecord>,
}

/// Trains from the seeded initialisation on a byte corpus. Data order and
/// initialisation depend only on `cfg.seed`, so configurations that differ
/// only in `(k, sink)` see identical data and start from identical weights.
pub fn train(cfg: &TrainConfig, corpus: &[u8], mut progress: impl FnMut(&LossRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.len() < 10 * cfg.batch_tokens {
        return Err(LabError::usage(format!(
            "corpus has {} bytes; need at least 10 x batch_tokens = {}",
            corpus.len(),
            10 * cfg.batch_tokens
        )));
    }
    let sink = cfg.sink_settings()?;
    let chunk_len = cfg.chunk_len();
    let chunks = chunk_bytes(corpus, chunk_len);
    let per_batch = cfg.batch_tokens / chunk_len;
    let schedule = cfg.schedule();
    let mut params = Params::init(&cfg.model, derive_seed(cfg.seed, "init", &[]));
    let mut opt = AdamW::new(&params, (cfg.betas[0], cfg.betas[1]), cfg.weight_decay);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(per_batch);
        while batch.len() < per_batch {
            if cursor >= order.len() {
                order = (0..chunks.len()).collect();
                order.shuffle(&mut rng_for(cfg.seed, "data", &[epoch]));
                epoch += 1;
                cursor = 0;
            }
            batch.push(chunks[order[cursor]].clone());
            cursor += 1;
        }
        let tokens = (step * cfg.batch_tokens) as u64;
        let lr = schedule.lr(tokens);
        let (loss, mut grads) = loss_and_grad(&cfg.model, &params, &batch, &sink)?;
        if !loss.total().is_finite() {
            return Err(LabError::numeric(format!("training step {step}"), "loss diverged"));
        }
        let gn = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !gn.is_finite() {
            return Err(LabError::numeric(format!("training step {step}"), "non-finite gradient norm"));
        }
        opt.step(&mut params, &grads, lr);
        let rec = LossRecord {
            step,
            tokens,
            ce_loss: loss.ce,
            sink_loss: loss.sink,
            lr,
            grad_norm: gn,
        };
        progress(&rec);
        trace.push(rec);
    }
    params.round_to_f32();
    let checkpoint = Checkpoint::from_params(&cfg.model, &params, cfg.provenance());
    Ok(TrainOutcome { checkpoint, trace })
}

/// The three matched configurations: plain (`k = 0`), registers without
/// hinge, registers with hinge. Everything else is shared.
pub fn trio_configs(base: &TrainConfig, k: usize) -> [(String, TrainConfig); 3] {
    let mut plain = base.clone();
    plain.model.k_registers = 0;
    plain.sink_enabled = false;
    plain.sink_channels_override = None;
    let mut dr = base.clone();
    dr.model.k_registers = k;
    dr.sink_enabled = false;
    dr.sink_channels_override = None;
    let mut dr_sink = dr.clone();
    dr_sink.sink_enabled = true;
    [
        ("k0".to_string(), plain),
        (format!("k{k}"), dr),
        (format!("k{k}_sink"), dr_sink),
    ]
}

/// FP evaluation NLLs of a trio and whether their spread fits `budget`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrioMatch {
    pub nlls: Vec<(String, f64)>,
    pub spread: f64,
    pub budget: f64,
    pub within_budget: bool,
}

pub fn trio_match(named: &[(String, &Checkpoint)], eval: &[Vec<u32>], budget: f64) -> Result<TrioMatch> {
    let nlls = named
        .iter()
        .map(|(n, c)| Ok((n.clone(), PreparedModel::fp(c)?.nll(eval)?)))
        .collect::<Result<Vec<_>>>()?;
    let max = nlls.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let min = nlls.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let spread = max - min;
    Ok(TrioMatch {
        nlls,
        spread,
        budget,
        within_budget: spread <= budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_text;

    fn tiny_run() -> TrainConfig {
        let mut cfg = TrainConfig::smoke();
        cfg.model = ModelConfig::tiny(2);
        cfg.model.vocab_size = 256;
        cfg.steps = 30;
        cfg.batch_tokens = 64;
        cfg.warmup_tokens = 64 * 3;
        cfg.sink_tau = 0.5;
        cfg
    }

    #[test]
    fn loss_falls_and_runs_repeat_bit_for_bit() {
        let cfg = tiny_run();
        let corpus = synthetic_text(1, 8 * 1024);
        let a = train(&cfg, &corpus, |_| {}).unwrap();
        let b = train(&cfg, &corpus, |_| {}).unwrap();
        assert_eq!(loss_trace_csv(&a.trace), loss_trace_csv(&b.trace));
        assert_eq!(a.checkpoint, b.checkpoint);
        let first = a.trace[0].ce_loss;
        let last = a.trace.last().unwrap().ce_loss;
        assert!(last < first, "{first} -> {last}");
        assert!(a.checkpoint.provenance.contains("seed=0"));
    }

    #[test]
    fn config_errors() {
        let mut cfg = tiny_run();
        cfg.model.k_registers = 0;
        assert!(cfg.validate().is_err());
        cfg.sink_channels_override = Some(2);
        cfg.validate().unwrap();
        let mut cfg = tiny_run();
        cfg.warmup_tokens = cfg.total_tokens() + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_run();
        cfg.sink_tau = 0.0;
        assert!(cfg.validate().is_err());
        assert!(train(&tiny_run(), &[1u8; 100], |_| {}).is_err());
    }

    #[test]
    fn toml_roundtrip_with_defaults() {
        let cfg: TrainConfig = toml::from_str("steps = 5\nseed = \"7\"\n[model]\nk_registers = 0\n").unwrap();
        assert_eq!(cfg.steps, 5);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.d_model, 128);
        let back: TrainConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn trio_differs_only_in_k_and_sink() {
        let [(_, a), (_, b), (_, c)] = trio_configs(&TrainConfig::smoke(), 4);
        assert_eq!((a.model.k_registers, a.sink_enabled), (0, false));
        assert_eq!((b.model.k_registers, b.sink_enabled), (4, false));
        assert_eq!((c.model.k_registers, c.sink_enabled), (4, true));
        assert_eq!((a.seed, a.steps, a.batch_tokens), (c.seed, c.steps, c.batch_tokens));
    }
}
