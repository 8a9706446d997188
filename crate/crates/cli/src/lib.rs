//! Experiment driver: config parsing, subcommands and reports.

pub mod config;
pub mod error;
pub mod report;
pub mod run;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use report::RunReport;
