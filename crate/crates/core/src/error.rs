use std::path::PathBuf;

use thiserror::Error;

use crate::RequestId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate request id {0}")]
    DuplicateId(RequestId),

    #[error("request {id} needs {required} KV tokens but an instance only holds {capacity}")]
    CapacityExceeded {
        id: RequestId,
        required: u64,
        capacity: u64,
    },

    #[error("out-of-order token delivery: expected index {expected}, got {got}")]
    OutOfOrderDelivery { expected: usize, got: usize },

    #[error("calibration samples are rank deficient ({0}); supply samples with more varied batch sizes and KV totals")]
    RankDeficient(String),

    #[error("transfer source and destination are both instance {0}")]
    SelfTransfer(usize),

    #[error("reports are not comparable: {0}")]
    Incomparable(String),

    #[error("simulation invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
