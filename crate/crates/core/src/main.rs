use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use rlvr_lab::commands::{run, Context, Subcommand};
use rlvr_lab::config::ExperimentConfig;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    /// Generate a synthetic corpus file.
    Gen,
    /// Train a tabular policy and write the trace and snapshots.
    Train,
    /// Run group- and sample-level probes.
    Probe,
    /// pass@k, solvability overlap and reward density for trained runs.
    Report,
    /// Judge real programs in a problem directory.
    Exec,
}

#[derive(Debug, Parser)]
#[command(name = "rlvr-lab", version, about = "Reward design and gradient diagnostics for critic-free RL on code")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cmd = match cli.command {
        Command::Gen => Subcommand::Gen,
        Command::Train => Subcommand::Train,
        Command::Probe => Subcommand::Probe,
        Command::Report => Subcommand::Report,
        Command::Exec => Subcommand::Exec,
    };
    let result = ExperimentConfig::load(&cli.config)
        .and_then(|cfg| Context::new(cfg, cli.seed, cli.workers, cli.out))
        .and_then(|ctx| run(cmd, &ctx));
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("rlvr-lab: {e}");
            ExitCode::FAILURE
        }
    }
}
