//! `capspread`: run the capacity-expansion pipeline from a JSON config.
//!
//! Exit codes: 0 all checks pass, 1 a check failed (or a runtime error),
//! 2 config error, 3 unsupported case.

use std::path::PathBuf;
use std::process::ExitCode;

use capspread::config::RunConfig;
use capspread::pipeline::{exit_code, run, Stage};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "capspread", version, about = "Irreversible capacity expansion on positive cones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate driver scenarios.
    Simulate(Opts),
    /// Solve for the base-capacity signal and check its backward equation.
    SolveSignal(Opts),
    /// Build the optimal policy and verify its state.
    BuildPolicy(Opts),
    /// Estimate Ψ and check the first-order conditions.
    VerifyFoc(Opts),
    /// Compare payoffs against perturbed policies.
    Compare(Opts),
    /// All stages in order.
    Full(Opts),
}

#[derive(Args)]
struct Opts {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, opts) = match cli.command {
        Command::Simulate(o) => (Stage::Simulate, o),
        Command::SolveSignal(o) => (Stage::SolveSignal, o),
        Command::BuildPolicy(o) => (Stage::BuildPolicy, o),
        Command::VerifyFoc(o) => (Stage::VerifyFoc, o),
        Command::Compare(o) => (Stage::Compare, o),
        Command::Full(o) => (Stage::Full, o),
    };
    let code = match execute(stage, opts) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}

fn execute(stage: Stage, opts: Opts) -> capspread::Result<i32> {
    let mut cfg = RunConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if opts.workers.is_some() {
        cfg.workers = opts.workers;
    }
    let out = opts.out.unwrap_or_else(|| cfg.output.clone());
    let outcome = run(&cfg, stage, &out)?;
    for s in &outcome.stages {
        println!("{:<13} {:?}", s.stage, s.verdict);
    }
    println!("artifacts in {} ({} files)", out.display(), outcome.files.len());
    Ok(outcome.exit_code())
}
