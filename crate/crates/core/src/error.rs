use std::path::PathBuf;

use thiserror::Error;

use crate::task::FormatError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {layer}")]
    Numeric { layer: &'static str },

    #[error("stale rollout: rollouts were sampled from snapshot {expected:016x}, got {got:016x}")]
    Staleness { expected: u64, got: u64 },

    #[error("checkpoint {path}: {kind}")]
    Checkpoint { path: PathBuf, kind: CheckpointError },

    #[error("entropy estimation failed: {0}")]
    Estimation(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("format error: {0}")]
    Format(#[from] FormatError),

    #[error("judge: {0}")]
    Judge(#[from] crate::eval::JudgeError),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Failure modes of checkpoint loading.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("vocabulary digest mismatch")]
    DigestMismatch,
    #[error("file truncated")]
    Truncated,
    #[error("malformed header: {0}")]
    Header(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
