use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar parameter is outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("config error: {0}")]
    Config(String),

    /// A file on disk could not be decoded. `field` names the offending entry.
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    /// A stored tensor does not fit the architecture it is loaded into.
    #[error("shape mismatch for parameter `{name}`: expected {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss; `term` names the first bad term.
    #[error("training error: non-finite `{term}` at iteration {iter}")]
    NonFinite { term: &'static str, iter: usize },

    #[error("tracking error: {0}")]
    Tracking(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}
