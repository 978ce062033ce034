use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while reading or writing tensor files.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("unsupported dtype {descr:?} at byte {offset}")]
    UnsupportedDtype { descr: String, offset: usize },
    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("shape {shape:?} holds {expected} elements but buffer has {found}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Error)]
pub enum ErqError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl ErqError {
    pub fn validation(msg: impl Into<String>) -> Self {
        ErqError::Validation(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        ErqError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 validation, 2 numerical, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            ErqError::Numerical(_) => 2,
            ErqError::Verification(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, ErqError>;
