//! Operator surface for federated answer-selection experiments: corpus
//! generation, single runs, experiment grids and checkpoint evaluation.

pub mod commands;
pub mod config;
pub mod error;
pub mod grid;

pub use error::{CliError, Result};
