use std::path::Path;

use sislink_core::Error;

/// Failure of a subcommand, classified by process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, flags or input files (exit 1).
    #[error("{0}")]
    Config(String),
    /// Numerical breakdown during a run (exit 2).
    #[error("{0}")]
    Numeric(String),
    /// A self-check or calibration target was not met (exit 3).
    #[error("{0}")]
    Acceptance(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Acceptance(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Config(format!("{}: {e}", path.display()))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } | Error::DegenerateEqualizer(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
