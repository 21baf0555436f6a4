//! Command-line front end: configuration, subcommands and exit codes.

pub mod commands;
pub mod config;
mod error;

pub use commands::{cmd_bench, cmd_eval, cmd_extract, cmd_train, BenchSummary, SummaryRow};
pub use config::{DataSource, RunConfig, Seeds};
pub use error::{CliError, CliResult};
