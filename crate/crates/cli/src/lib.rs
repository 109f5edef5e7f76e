//! Command-line front end: run configuration, subcommands, and exit codes.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
