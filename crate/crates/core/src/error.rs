use std::io;

use thiserror::Error;

use crate::hpo::TrialRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, sizes, bounds).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("singular matrix: non-positive pivot {pivot:e} at column {column}")]
    Singular { column: usize, pivot: f64 },

    #[error("degenerate channel: Gram matrix singular after diagonal loading")]
    DegenerateChannel,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite training loss at epoch {epoch} (parameters: {params:?})")]
    NonFiniteLoss { epoch: usize, params: Vec<f64> },

    #[error("search failed: none of the {} trials completed", history.len())]
    SearchFailed { history: Vec<TrialRecord> },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 contract violation, 2 numeric failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) => 1,
            Error::Singular { .. }
            | Error::DegenerateChannel
            | Error::Numeric(_)
            | Error::NonFiniteLoss { .. }
            | Error::SearchFailed { .. } => 2,
            Error::Context { source, .. } => source.exit_code(),
            Error::Format(_) | Error::Truncated { .. } | Error::Io(_) | Error::Json(_) => 3,
        }
    }
}
