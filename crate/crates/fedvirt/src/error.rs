//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// An operation was called with tensors whose shapes do not conform to
    /// its rule. Names the primitive and the offending shapes.
    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A sanctioned operation produced a NaN or infinity. Overflow is an
    /// error, never a silent value.
    #[error("non-finite value produced by `{op}`")]
    NumericOverflow { op: &'static str },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file failed to parse. Carries the byte offset where parsing stopped
    /// when one is meaningful.
    #[error("parse error in {path} at byte {offset}: {detail}")]
    Parse {
        path: String,
        offset: u64,
        detail: String,
    },

    /// Configuration rejected, with the key path that caused it.
    #[error("config error at `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
