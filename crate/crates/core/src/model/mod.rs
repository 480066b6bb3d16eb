//! SwiGLU decoder-only transformer: configuration, checkpoint container,
//! block operations and the instrumented forward pass.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod ops;
pub mod params;
pub mod site;

pub use checkpoint::{Checkpoint, FoldRecord, Tensor};
pub use config::ModelConfig;
pub use forward::{
    capture_split, forward, nll_eval, CaptureSpec, ForwardTrace, NoObserver, PreparedModel, Reservoir,
    SiteObserver, TraceRecorder,
};
pub use params::{LayerParams, ParamKind, Params};
pub use site::{site_kind, Linear, SiteId, SiteKind};
