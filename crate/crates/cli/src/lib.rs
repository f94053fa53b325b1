//! Command surface of rsak: checkpoints, run configs and the subcommands
//! behind the `rsak` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;

pub use checkpoint::{Checkpoint, CheckpointError, Tensor};
pub use config::{DataPaths, RunConfig};
pub use error::{CliError, CliResult};
