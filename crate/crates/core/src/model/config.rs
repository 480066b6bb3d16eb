use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Architecture hyperparameters of a SwiGLU decoder-only transformer.
///
/// The trailing `k_registers` channels of the residual stream form the
/// register partition; `k_registers = 0` gives a plain RMSNorm model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_inner: usize,
    pub k_registers: usize,
    pub vocab_size: usize,
    pub seq_len_max: usize,
    pub norm_eps: f64,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    /// Desk-scale shape: 4 layers at d=128 with the 2752/1024 inner ratio and
    /// a 1/16 register share.
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            head_dim: 32,
            d_inner: 344,
            k_registers: 8,
            vocab_size: 256,
            seq_len_max: 256,
            norm_eps: 1e-6,
            rope_base: 10_000.0,
        }
    }
}

impl ModelConfig {
    /// Tiny shape used by gradient checks and unit tests.
    pub fn tiny(k_registers: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            d_inner: 24,
            k_registers,
            vocab_size: 32,
            seq_len_max: 16,
            norm_eps: 1e-6,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_inner", self.d_inner),
            ("vocab_size", self.vocab_size),
            ("seq_len_max", self.seq_len_max),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(LabError::config(format!("{name} must be at least 1")));
            }
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(LabError::config(format!(
                "d_model ({}) must equal n_heads ({}) x head_dim ({})",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(LabError::config("head_dim must be even for rotary embeddings"));
        }
        if self.k_registers >= self.d_model {
            return Err(LabError::config(format!(
                "k_registers ({}) must be smaller than d_model ({})",
                self.k_registers, self.d_model
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(LabError::config("norm_eps must be a small positive number"));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(LabError::config("rope_base must be positive"));
        }
        Ok(())
    }

    /// Number of semantic channels, `d_model - k_registers`.
    pub fn d_sem(&self) -> usize {
        self.d_model - self.k_registers
    }

    pub fn n_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 3 * d * d + d * d + 3 * d * self.d_inner;
        self.vocab_size * d + self.n_layers * per_layer + d
    }
}
