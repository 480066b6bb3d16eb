use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sqlab_core::harness::{self, ExperimentSpec, TrainSpec};
use sqlab_core::model::ModelConfig;
use sqlab_core::Result;

#[derive(Parser)]
#[command(name = "sqlab", version, about = "Desk-scale W4A4 quantization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a checkpoint (or the matched trio) from a TOML train spec.
    Train {
        spec: PathBuf,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Full method matrix (weight-only and W4A4) for every checkpoint.
    Matrix { spec: PathBuf },
    /// Skip-ablation excess-NLL budget.
    Budget { spec: PathBuf },
    /// Per-site kurtosis and severity report.
    Tails { spec: PathBuf },
    /// Noise-injection sensitivity sweep at generator inputs.
    Noise { spec: PathBuf },
    /// Run the property suite against a checkpoint.
    Verify {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a checkpoint's manifest.
    Inspect { checkpoint: PathBuf },
    /// Write a randomly initialised checkpoint.
    Init {
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { spec, seed } => {
            let mut spec = TrainSpec::load(&spec)?;
            if let Some(s) = seed {
                spec.train.seed = s;
            }
            harness::cmd_train(&spec, |line| eprintln!("{line}"))
        }
        Command::Matrix { spec } => Ok(harness::cmd_matrix(&ExperimentSpec::load(&spec)?)?.0),
        Command::Budget { spec } => harness::cmd_budget(&ExperimentSpec::load(&spec)?),
        Command::Tails { spec } => harness::cmd_tails(&ExperimentSpec::load(&spec)?),
        Command::Noise { spec } => harness::cmd_noise(&ExperimentSpec::load(&spec)?),
        Command::Verify { checkpoint, seed } => harness::cmd_verify(&checkpoint, seed),
        Command::Inspect { checkpoint } => harness::cmd_inspect(&checkpoint),
        Command::Init { out, k, seed } => {
            let cfg = ModelConfig {
                k_registers: k,
                ..ModelConfig::default()
            };
            harness::cmd_init(&cfg, seed, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
