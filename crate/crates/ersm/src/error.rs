use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Everything the command layer can fail with.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("checkpoint does not match the configuration: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Core(#[from] ersm_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 1 for invalid input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Mismatch(_) => 1,
            CliError::Io { .. } | CliError::Format { .. } => 2,
            CliError::Core(e) => match e {
                ersm_core::Error::NonFinite(_) | ersm_core::Error::Diverged { .. } | ersm_core::Error::Tape(_) => 2,
                _ => 1,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
