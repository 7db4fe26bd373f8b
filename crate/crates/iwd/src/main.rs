use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use iwd::{Command, RunOptions};

#[derive(Parser)]
#[command(name = "iwd", version, about = "Influence-weighted dataset distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Experiment seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (falls back to IWD_THREADS, then all cores).
    #[arg(long, global = true, env = "IWD_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Distill the dataset into a synthetic set.
    Distill,
    /// Score every real instance's influence on the objective.
    Influence,
    /// Train fresh models on a synthetic set and report test accuracy.
    Evaluate,
    /// Compare random-select, influence-select, prune-then-distill and IWD.
    Ablate,
    /// Accuracy across softmax temperatures.
    TauSweep,
    /// Classical influence against exact leave-one-out retraining.
    LooOracle,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Distill => Command::Distill,
            Cmd::Influence => Command::Influence,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Ablate => Command::Ablate,
            Cmd::TauSweep => Command::TauSweep,
            Cmd::LooOracle => Command::LooOracle,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config) = cli.config else {
        eprintln!("error: --config is required");
        return ExitCode::from(2);
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    let opts = RunOptions {
        config,
        out: cli.out,
        seed: cli.seed,
    };
    let started = Instant::now();
    match iwd::run(cli.command.into(), &opts) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            eprintln!("done in {:.2} s", started.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
