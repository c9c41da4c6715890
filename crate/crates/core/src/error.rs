use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    OutOfVocab { id: usize, size: usize },

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("unknown attention `{0}`")]
    UnknownAttention(String),

    #[error("direction {0} has not been trained")]
    Untrained(String),

    #[error("non-finite loss {loss} at update {update} on pair {pair}")]
    NonFinite { loss: f64, update: usize, pair: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration rather than bad data or I/O.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
