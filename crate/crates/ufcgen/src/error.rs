use std::fmt;

/// Library-wide error type.
#[derive(Debug)]
pub enum Error {
    /// A precondition on an argument was violated (shape mismatch, bad range, ...).
    InvalidArgument(String),
    /// An index (token code, target id, ...) was out of range.
    Index(String),
    /// An operation was called in the wrong state (backward twice, stale cache, ...).
    State(String),
    /// A structural contract between modules was violated.
    Contract(String),
    /// The requested control signal cannot be honored by this decoder.
    UnsupportedControl(String),
    /// A file had the wrong magic, version, or structure.
    Format(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::UnsupportedControl(m) => write!(f, "unsupported control: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
