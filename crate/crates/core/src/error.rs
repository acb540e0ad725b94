use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PegError>;

#[derive(Debug, Error)]
pub enum PegError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line} (byte {byte}): {msg}")]
    Parse { line: usize, byte: usize, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("backward called without a cached forward pass")]
    NoCachedForward,

    #[error("split error: {0}")]
    Split(String),

    #[error("clustering error: {0}")]
    Clustering(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("gradient requested with respect to a teacher signal")]
    StopGradient,

    #[error("teacher set is empty but mutual loss weights are non-zero")]
    EmptyTeacherSet,

    #[error("metric error: {0}")]
    Metric(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl PegError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PegError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's configuration rather than a
    /// failure while running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            PegError::Config(_) | PegError::UnknownPreset(_) | PegError::Parse { .. }
        )
    }
}
