//! Crate-wide error type and result alias.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DlfmError>;

#[derive(Debug, Error)]
pub enum DlfmError {
    /// Tensor operands do not have the shapes an operation requires.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Caller-supplied values violate a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An iterative numeric routine failed to converge or diverged.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Filesystem access failed.
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents are not a valid artifact
    /// (bad magic, version mismatch, truncation, checksum failure).
    #[error("malformed file: {0}")]
    Format(String),
}

impl DlfmError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        DlfmError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 for validation or numeric
    /// problems, 2 for anything filesystem-related.
    pub fn exit_code(&self) -> i32 {
        match self {
            DlfmError::Io { .. } | DlfmError::Format(_) => 2,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for DlfmError {
    fn from(err: serde_json::Error) -> Self {
        DlfmError::Format(err.to_string())
    }
}
