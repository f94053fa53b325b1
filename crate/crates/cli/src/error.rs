use thiserror::Error;

use crate::checkpoint::CheckpointError;

/// Failure of a subcommand, carrying the process exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or configuration file (exit code 1).
    #[error("{0}")]
    Config(String),
    /// Unreadable or inconsistent data or checkpoint (exit code 2).
    #[error("{0}")]
    Data(String),
    /// A verification that ran to completion and failed (exit code 3).
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl From<rsak_core::Error> for CliError {
    fn from(e: rsak_core::Error) -> Self {
        use rsak_core::Error as E;
        match e {
            E::Config(_) | E::Train(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
