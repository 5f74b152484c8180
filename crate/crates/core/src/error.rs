//! Crate-wide error type. One enum, grouped by failure family, so callers
//! can match on the kind while messages stay specific.

use std::fmt;
use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Shape mismatch in a graph operation; names the op and the shapes seen.
    Shape { op: &'static str, detail: String },
    /// A caller-supplied argument violated a documented precondition.
    InvalidArg(String),
    /// Numerical failure: NaN/infinite gradients, singular systems, divergence.
    Numeric(String),
    /// Data-level failure: malformed corpora, empty pools, budget violations.
    Data(String),
    /// Configuration file or value rejected.
    Config(String),
    /// Serialized artifact (checkpoint, manifest, signal file) failed to parse.
    Format(String),
    /// A lifecycle rule was broken (e.g. refitting a frozen module,
    /// running a stage without its prerequisite checkpoint).
    Contract(String),
    /// Filesystem error with the path that triggered it.
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    /// Attach a path to an `std::io::Error`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in `{op}`: {detail}"),
            Error::InvalidArg(msg) => write!(f, "invalid argument: {msg}"),
            Error::Numeric(msg) => write!(f, "numerical error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
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
