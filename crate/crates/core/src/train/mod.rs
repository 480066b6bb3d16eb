//! From-scratch training: AdamW, warmup + cosine schedule, register hinge,
//! analytic backward pass and its finite-difference check.

pub mod adamw;
pub mod backward;
pub mod gradcheck;
pub mod schedule;
pub mod sink;
pub mod trainer;

pub use backward::{batch_loss, loss_and_grad, BatchLoss, SinkSettings};
pub use gradcheck::{grad_check, probe_params, GradCheckReport};
pub use schedule::LrSchedule;
pub use sink::sink_loss;
pub use trainer::{loss_trace_csv, train, trio_configs, trio_match, LossRecord, TrainConfig, TrainOutcome, TrioMatch};
