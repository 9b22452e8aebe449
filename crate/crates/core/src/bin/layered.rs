use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use layered_control::error::Result;
use layered_control::experiment::{
    cmd_clqr, cmd_lqr_table, cmd_rho_sweep, cmd_verify_theory, CommandOutput, ExperimentConfig,
};

/// Layered planning and tracking experiments on random LQ problems.
#[derive(Parser)]
#[command(name = "layered", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat JSON config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory receiving the CSV files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Number of seeded systems.
    #[arg(long, global = true)]
    systems: Option<usize>,

    /// Replace the learned tracker by the exact one.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    oracle_tracking: Option<bool>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Identity checks and dual-learning traces.
    VerifyTheory,
    /// Learned pipeline against the no-dual ablation.
    LqrTable,
    /// Pipeline table per penalty value.
    RhoSweep,
    /// Constrained pipeline with an MLP dual.
    Clqr,
}

fn run(cli: &Cli) -> Result<CommandOutput> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    if cli.out_dir.is_some() {
        config.output_path = cli.out_dir.clone();
    }
    if cli.systems.is_some() {
        config.n_systems = cli.systems;
    }
    if cli.oracle_tracking.is_some() {
        config.oracle_tracking = cli.oracle_tracking;
    }
    match cli.command {
        Command::VerifyTheory => cmd_verify_theory(&config),
        Command::LqrTable => cmd_lqr_table(&config),
        Command::RhoSweep => cmd_rho_sweep(&config),
        Command::Clqr => cmd_clqr(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            for line in &out.summary {
                println!("{line}");
            }
            for file in &out.files {
                println!("wrote {}", file.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
