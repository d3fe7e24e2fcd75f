//! Library half of the `salf` command: config resolution, artifact writers
//! and the subcommands themselves.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{run_sweep, train, verify, Outcome, Suite, SweepArgs, TrainArgs, VerifyArgs, DATA_DIR_ENV};
