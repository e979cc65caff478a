//! Command-line pipeline: ingest, train, decide, experiment, importance and
//! plot data, with every artifact recorded in a digest manifest.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use config::{Overrides, RunConfig};
pub use error::{exit, CliError};
