//! Desk-scale W4A4 quantization laboratory.
//!
//! Trains small SwiGLU decoder-only transformers (optionally with a
//! register partition of the residual stream and a register-magnitude hinge
//! loss), simulates weight/activation fake quantization with per-site skip
//! sets, applies calibration- and rotation-based post-hoc methods, and
//! produces tail, excess-NLL budget and noise-sensitivity reports.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod model;
pub mod posthoc;
pub mod quant;
pub mod seeds;
pub mod train;

pub use error::{LabError, Result};
