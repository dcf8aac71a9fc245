use thiserror::Error;

/// Errors raised by the sensing pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SenseError {
    /// An argument is outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),
    /// Two grids that must share a lattice do not.
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    /// A scenario failed validation.
    #[error("invalid scenario: {}", .0.join("; "))]
    InvalidScenario(Vec<String>),
    /// Reading or writing an artifact failed.
    #[error("io error: {0}")]
    Io(String),
    /// An artifact could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),
}

impl SenseError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        SenseError::Domain(msg.into())
    }
}

impl From<std::io::Error> for SenseError {
    fn from(err: std::io::Error) -> Self {
        SenseError::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SenseError>;
