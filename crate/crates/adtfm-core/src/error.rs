//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by tensor arithmetic, the tape, and the pipeline modules.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A shape or dimension did not match what an operation requires.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A leaf node was not bound when replaying a tape.
    #[error("missing input: leaf node {0} is unbound")]
    MissingInput(usize),

    /// An operation's contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// A data invariant did not hold.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Configuration rejected.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// File or stream I/O failed.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A dataset or checkpoint file could not be parsed.
    #[error("parse error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<u64>, msg: String },
}

impl CoreError {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        CoreError::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn parse(line: Option<u64>, msg: impl ToString) -> Self {
        CoreError::Parse {
            line,
            msg: msg.to_string(),
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;
