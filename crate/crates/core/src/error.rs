use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum GcnError {
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("referential integrity: {0}")]
    Integrity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("degenerate generator: {0}")]
    DegenerateGenerator(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("run directory is locked by another process: {0}")]
    Locked(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("run halted after {0} meta-iterations")]
    Interrupted(usize),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl GcnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GcnError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, GcnError::Config(_))
    }
}

impl From<serde_json::Error> for GcnError {
    fn from(e: serde_json::Error) -> Self {
        GcnError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, GcnError>;
