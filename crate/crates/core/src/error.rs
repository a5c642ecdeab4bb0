use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A malformed input record, tagged with its 1-based line number.
#[derive(Debug, Clone, PartialEq)]
pub struct LineError {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate (lat {lat}, lon {lon})")]
    InvalidCoord { lat: f64, lon: f64 },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Line(LineError),

    #[error("aborting after {count} malformed lines (first: {first})")]
    TooManyErrors { count: usize, first: LineError },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the program itself rather than its inputs.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Invariant(_))
    }
}
