//! Crate-wide error type and result alias.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    Shape(String),
    /// Invalid configuration value or combination.
    Config(String),
    /// Malformed input data (dataset files, labels).
    Data(String),
    /// I/O failure with the path that caused it.
    Io { path: String, source: std::io::Error },
    /// Non-finite values or other numerical failure during a run.
    Numeric(String),
    /// Corrupt or truncated checkpoint; offset is the first bad byte.
    Checkpoint { offset: u64, msg: String },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Numeric(msg) => write!(f, "numerical failure: {msg}"),
            Error::Checkpoint { offset, msg } => {
                write!(f, "checkpoint error at byte {offset}: {msg}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
