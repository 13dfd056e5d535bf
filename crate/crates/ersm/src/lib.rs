//! File formats, run configuration and the command layer around
//! [`ersm_core`].

pub mod checkpoint;
mod codec;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsio;
pub mod pgm;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, Result};
