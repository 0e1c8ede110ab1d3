use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use loralab_cli::config::ExperimentConfig;

/// Desk-scale laboratory for low-rank adapter initialization: run single
/// experiments, race initialization schemes, and sweep ablation grids on
/// seeded synthetic tasks.
#[derive(Parser)]
#[command(name = "loralab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured init scheme across all seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel workers for independent runs; results are identical
        /// for any value.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Race every scheme in `schemes` on shared seeds.
    Race {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Cartesian sweep over the [ablate] grid; each cell runs like race.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Parse and validate a config without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the contents of an adapter checkpoint file.
    InspectCheckpoint {
        /// Path to a .lora checkpoint.
        path: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            out,
            workers,
        } => ExperimentConfig::load(&config)
            .and_then(|cfg| loralab_cli::cmd_run(&cfg, out.as_deref(), workers).map(|_| ())),
        Command::Race {
            config,
            out,
            workers,
        } => ExperimentConfig::load(&config)
            .and_then(|cfg| loralab_cli::cmd_race(&cfg, out.as_deref(), workers).map(|_| ())),
        Command::Ablate {
            config,
            out,
            workers,
        } => ExperimentConfig::load(&config)
            .and_then(|cfg| loralab_cli::cmd_ablate(&cfg, out.as_deref(), workers).map(|_| ())),
        Command::Validate { config } => loralab_cli::cmd_validate(&config),
        Command::InspectCheckpoint { path } => loralab_cli::cmd_inspect_checkpoint(&path),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
