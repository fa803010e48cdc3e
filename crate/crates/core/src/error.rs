use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("augmentation offset ({dy}, {dx}) outside padded range 0..={max}")]
    OffsetOutOfRange { dy: usize, dx: usize, max: usize },

    #[error("corrupt data in {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("ledger line {line}: {detail}")]
    Ledger { line: usize, detail: String },

    #[error("aggregation incomplete: {0}")]
    Incomplete(String),

    #[error("{0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
