use std::fmt;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A forward evaluation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violated: {0}")]
    Contract(String),

    /// Malformed input file. Rows and columns are 1-based; row 1 is the header.
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    /// The dataset cannot be scored meaningfully (e.g. constant columns).
    #[error("degenerate dataset: {0}")]
    Degenerate(String),

    /// A kernel matrix could not be factorized even after jitter escalation.
    #[error("factorization failed: {0}")]
    Factorization(String),

    /// Training stopped early; a checkpoint was written when a directory was configured.
    #[error("run aborted at iteration {iteration}: {cause}")]
    Aborted {
        iteration: u64,
        cause: Box<Error>,
        checkpoint: Option<std::path::PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl fmt::Display) -> Self {
        Error::Dimension {
            op,
            detail: detail.to_string(),
        }
    }

    pub(crate) fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }

    /// Prefix a non-finite error with the location (layer, loss term) it came from.
    pub(crate) fn within(self, context: impl fmt::Display) -> Self {
        match self {
            Error::NonFinite(op) => Error::NonFinite(format!("{context}: {op}")),
            other => other,
        }
    }
}
