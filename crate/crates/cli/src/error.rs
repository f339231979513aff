use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] svfreg::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    /// 2 for I/O, format and usage errors, 3 for grid mismatches, 4 when the
    /// optimizer diverges.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(svfreg::Error::GridMismatch { .. }) => 3,
            CliError::Core(svfreg::Error::Diverged { .. }) => 4,
            _ => 2,
        }
    }
}
