use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedprune::config::{Overrides, RunConfig, SchemeName};
use fedprune::federation::Strategy;
use fedprune::report::RunManifest;
use fedprune::runner::{replay, run_command, Command, RunOutcome};

/// Simulate federated training with slow clients.
#[derive(Parser)]
#[command(name = "fedprune", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one strategy at one slow-client fraction.
    Train(RunArgs),
    /// Run fedavg, fedprune_no_clt and fedprune on shared seeds.
    Compare(RunArgs),
    /// Run the compared strategies at slow fractions 0.1, 0.3, 0.5, 0.7 and 0.9.
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// fedavg, fedprune, fedprune_no_clt or small_model.
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    slow_fraction: Option<f64>,
    #[arg(long)]
    rounds: Option<u64>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "FEDPRUNE_OUT")]
    out: Option<PathBuf>,
    /// iid or skewed.
    #[arg(long)]
    partition: Option<SchemeName>,
    /// Re-run the command recorded in a previous run's manifest.json.
    #[arg(long, conflicts_with_all = ["config", "strategy", "slow_fraction", "rounds", "seed", "partition"])]
    manifest: Option<PathBuf>,
}

fn execute(command: Command, args: RunArgs) -> Result<RunOutcome> {
    if let Some(path) = &args.manifest {
        let recorded = RunManifest::read(path).with_context(|| format!("reading {}", path.display()))?;
        if recorded.command != command.name() {
            bail!("manifest records a '{}' run but '{}' was requested", recorded.command, command);
        }
        return replay(path, args.out.as_deref()).with_context(|| format!("replaying {}", path.display()));
    }
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        strategy: args.strategy,
        slow_fraction: args.slow_fraction,
        rounds: args.rounds,
        seed: args.seed,
        out_dir: args.out,
        partition: args.partition,
    });
    cfg.validate()?;
    Ok(run_command(command, &cfg)?)
}

fn print_summary(outcome: &RunOutcome) {
    println!(
        "{:<16} {:>6} {:>8} {:>9} {:>8} {:>10}",
        "strategy", "slow", "scheme", "acc_mean", "acc_std", "converged"
    );
    for row in outcome.table.rows() {
        let converged = row
            .rounds_to_threshold
            .map(|r| format!("round {r}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<16} {:>6.2} {:>8} {:>9.4} {:>8.4} {:>10}",
            row.strategy, row.slow_fraction, row.scheme, row.final_acc_mean, row.final_acc_std, converged
        );
    }
    for (fraction, summary) in &outcome.fairness {
        if let Some(best) = summary
            .rows
            .iter()
            .min_by(|a, b| a.acc_std.total_cmp(&b.acc_std))
            .filter(|_| summary.rows.len() > 1)
        {
            println!("slow fraction {fraction}: lowest accuracy spread is {}", best.strategy);
        }
    }
    println!("results written to {}", outcome.out_dir.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Compare(a) => (Command::Compare, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
    };
    match execute(command, args) {
        Ok(outcome) => {
            print_summary(&outcome);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
