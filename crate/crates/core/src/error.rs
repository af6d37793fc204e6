use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Shape or axis mismatch between tensors.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration (model topology, generator params, splits).
    #[error("configuration error: {0}")]
    Config(String),

    /// Misuse of an API contract (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    /// NaN/Inf encountered where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed on-disk data. `offset` is the byte position where
    /// parsing failed, when known.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
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
