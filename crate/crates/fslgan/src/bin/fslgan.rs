//! Command-line entry point for the benchmark runner.
//!
//! Exit codes: 0 success, 2 configuration error, 3 no eligible clients.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fslgan::config::ExperimentConfig;
use fslgan::error::Error;
use fslgan::runner;

#[derive(Parser)]
#[command(name = "fslgan", about = "Federated split-learning GAN benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Timing benchmark: bottleneck epoch time per splitting strategy.
    TimeBench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Accuracy benchmark: federated training across the configured M sweep.
    AccBench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference gradient checks for all layer kinds.
    Gradcheck,
    /// Re-run both benchmarks from an emitted resolved config.
    Replay {
        #[arg(long)]
        config_resolved: PathBuf,
    },
}

fn exit_for(err: &Error) -> ExitCode {
    match err {
        Error::NoEligibleClients(_) => ExitCode::from(3),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TimeBench { config } => {
            ExperimentConfig::load(config).and_then(|cfg| runner::run_time_benchmark(&cfg))
        }
        Command::AccBench { config } => {
            ExperimentConfig::load(config).and_then(|cfg| runner::run_accuracy_benchmark(&cfg))
        }
        Command::Gradcheck => runner::gradcheck_report().and_then(|ok| {
            if ok {
                Ok(())
            } else {
                Err(Error::NumericFailure("gradient check failed".into()))
            }
        }),
        Command::Replay { config_resolved } => runner::replay(config_resolved),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            exit_for(&err)
        }
    }
}
