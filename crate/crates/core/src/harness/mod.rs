//! Experiment orchestration: specs, output directories, the method matrix,
//! the verification suite and the command implementations.

pub mod commands;
pub mod config;
pub mod matrix;
pub mod output;
pub mod verify;

pub use commands::{cmd_budget, cmd_init, cmd_inspect, cmd_matrix, cmd_noise, cmd_tails, cmd_train, cmd_verify};
pub use config::{ExperimentSpec, TrainSpec};
pub use matrix::{MatrixRow, MethodMatrixReport, Precision};
pub use verify::{verify_suite, CheckOutcome};
