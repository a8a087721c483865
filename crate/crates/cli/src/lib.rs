//! Command-line harness: run configuration, evaluation reports, the toy
//! fixture and the `debias` subcommands.

pub mod commands;
pub mod config;
pub mod report;
pub mod toy;

pub use commands::{run, Cli, CliError};
