use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid value: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("insufficient samples: {0}")]
    Capacity(String),

    #[error("degenerate feature at sample {index}: emission is the zero vector")]
    DegenerateFeature { index: usize },

    #[error("sample {sample}: {source}")]
    Sample {
        sample: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// True for errors caused by malformed input files rather than bad
    /// arguments or runtime failures.
    pub fn is_data_format(&self) -> bool {
        match self {
            Error::Format(_) | Error::Truncated(_) => true,
            Error::Sample { source, .. } => source.is_data_format(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
