use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("missing {stage} artifacts at {path}; run `mkrem {command}` first")]
    MissingCache {
        stage: &'static str,
        path: PathBuf,
        command: &'static str,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Numeric(#[from] mkrem::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status: 1 for configuration and I/O problems, 2 for a
    /// missing upstream stage, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Io { .. } => 1,
            Self::MissingCache { .. } | Self::Format { .. } => 2,
            Self::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
