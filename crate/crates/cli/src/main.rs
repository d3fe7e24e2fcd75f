use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use salf_cli::config::Usage;
use salf_cli::{run_sweep, train, verify, Outcome, Suite, SweepArgs, TrainArgs, VerifyArgs};

/// Federated learning simulator with layer-wise straggler aggregation.
///
/// Exit status: 0 when everything requested completed and passed, 1 when a
/// run failed or a check did not hold, 2 for invalid invocations or configs.
#[derive(Parser)]
#[command(name = "salf", version)]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one federated training experiment.
    Train {
        config: PathBuf,
        /// Override a config entry, e.g. `--set stragglers.q=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// MNIST root; falls back to `data.dir`, then $SALF_DATA_DIR.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a theoretical result numerically.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 30)]
        clients: usize,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Options file for the theorem1 suite.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of methods, straggler fractions and seeds.
    Sweep {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_status(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<salf::Error>() {
        Some(salf::Error::Config(_) | salf::Error::Unsupported(_) | salf::Error::Format { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match cli.command {
        Command::Train { config, sets, seed, data_dir, out } => train(&TrainArgs { config, sets, seed, data_dir, out }),
        Command::Verify { suite, clients, layers, draws, seed, config, sets, out } => {
            verify(&VerifyArgs { suite, clients, layers, draws, seed, config, sets, out })
        }
        Command::Sweep { config, sets, data_dir, out } => run_sweep(&SweepArgs { config, sets, data_dir, out }),
    };
    match outcome {
        Ok(Outcome::Passed) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
