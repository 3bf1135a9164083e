use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, parameters or options that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid values inside otherwise well-formed input data.
    #[error("data error: {0}")]
    Data(String),
    /// An API called in the wrong order or with inconsistent inputs.
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}

/// Failures while decoding weight, dataset or threshold files.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u32 },
    #[error("truncated payload while reading {what}")]
    Truncated { what: String },
    #[error("tensor `{tensor}`: {reason}")]
    Tensor { tensor: String, reason: String },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("{0}")]
    Other(String),
}
