use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty shard set")]
    EmptyShardSet,
    #[error("zero mean load")]
    ZeroMeanLoad,
    #[error("zero capacity")]
    ZeroCapacity,
    #[error("insufficient history: need {need} blocks, have {have}")]
    InsufficientHistory { need: usize, have: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("MAPE undefined: all actuals are zero")]
    MapeUndefined,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config error: {key}: {msg}")]
    Config { key: String, msg: String },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("no rollout source")]
    NoRolloutSource,
    #[error("invariant breach at height {height}: {msg}")]
    Invariant { height: u64, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { key: key.into(), msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invariant { .. } => 3,
            Error::Config { .. } | Error::NoRolloutSource => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
