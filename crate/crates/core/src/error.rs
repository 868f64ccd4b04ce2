use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("tape does not match the parameters it is replayed against: {0}")]
    StaleTape(&'static str),

    #[error("non-finite value in {context} at index {index}: {value}")]
    NonFinite {
        context: &'static str,
        index: usize,
        value: f64,
    },

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("session is already finished")]
    SessionDone,

    #[error("replay buffer holds {size} transitions, {requested} requested")]
    Underfilled { size: usize, requested: usize },

    #[error("kernel matrix is not positive definite after jitter {jitter:e}")]
    Factorization { jitter: f64 },

    #[error("bandit observation without a pending arm selection")]
    NoPendingArm,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed interaction log ({} bad rows), first at line {}: {}", .rows.len(), .rows[0].0, .rows[0].1)]
    MalformedLog { rows: Vec<(usize, String)> },

    #[error("interaction log has {found} rows, at least {required} required")]
    TooFewRows { found: usize, required: usize },

    #[error("corrupt checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
