use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use klq_cli::commands;

#[derive(Debug, Parser)]
#[command(
    name = "klq",
    version,
    about = "KL-regularised Q-learning and PPO on tabular token tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Only print errors and failing checks.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an agent and write a run directory per sweep point.
    Train,
    /// Write the exact soft-optimal Q*, π* and V* of the task.
    Solve,
    /// Run a property suite: soft-operators, estimators, gradients or all.
    Verify { suite: Option<String> },
    /// Compare Q-space and (π, V)-space update sequences over a grid.
    Equivalence,
    /// Roll out a stored policy and report score, KL and RLHF reward.
    Eval,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = commands::Options {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        quiet: cli.quiet,
    };
    let result = match cli.command {
        Command::Train => commands::train(&opts),
        Command::Solve => commands::solve(&opts),
        Command::Verify { suite } => commands::verify(&opts, suite.as_deref()),
        Command::Equivalence => commands::equivalence(&opts),
        Command::Eval => commands::eval(&opts),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
