//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An index (class label, antenna, subcarrier) is outside its extent.
    #[error("index error in {op}: index {index} out of range 0..{extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    /// A configuration does not satisfy its invariants.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API contract (non-scalar loss, missing gradient, ...).
    #[error("contract error in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// An operation produced NaN or Inf.
    #[error("non-finite value produced by {op} at element {index}")]
    NonFinite { op: &'static str, index: usize },

    /// A binary file failed to parse.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Training aborted.
    #[error("training aborted at epoch {epoch}, batch {batch}: {detail}")]
    Training {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
