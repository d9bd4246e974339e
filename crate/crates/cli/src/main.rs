//! `gridrl`: scenario generation, edge-weight precomputation, training,
//! evaluation and model comparison.
//!
//! Exit codes: 0 success, 1 other failure, 2 scenario validation
//! exhausted, 3 non-finite loss, 4 checkpoint mismatch, 5 network hash
//! mismatch.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "gridrl",
    version,
    about = "Topology-aware RL for distribution-network outage management"
)]
struct Cli {
    /// Worker threads for rollouts, weight computation and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate validated training and disjoint test scenario files.
    GenScenarios(commands::GenScenariosArgs),
    /// Precompute topological edge weights into a cache file.
    PhWeights(commands::PhWeightsArgs),
    /// Train a policy from a run config.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint greedily on a scenario file.
    Eval(commands::EvalArgs),
    /// Evaluate two checkpoints and compare them.
    Compare(commands::CompareArgs),
}

/// Error carrying a specific process exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub fn exit_error(code: u8, message: impl Into<String>) -> anyhow::Error {
    Exit {
        code,
        message: message.into(),
    }
    .into()
}

pub fn default_out(flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    flag.or_else(|| std::env::var_os("GRID_RL_OUT").map(PathBuf::from))
        .ok_or_else(|| anyhow::anyhow!("no output directory: pass --out or set GRID_RL_OUT"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.max(1))
        .build_global()
    {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::GenScenarios(a) => commands::gen_scenarios(a),
        Command::PhWeights(a) => commands::ph_weights(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Exit>().map_or(1, |x| x.code);
            ExitCode::from(code)
        }
    }
}
