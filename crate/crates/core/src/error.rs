//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

/// Errors raised by the core pipeline stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Operand dimensions do not conform; names both operands.
    Shape { op: &'static str, detail: String },
    /// Invalid or inconsistent configuration.
    Config(String),
    /// Input violates an operation's precondition (e.g. out-of-range point).
    Domain(String),
    /// Non-finite value where a finite one is required.
    Numeric(String),
    /// A named parameter is missing from the store.
    Lookup { name: String },
    /// Training diverged at the given step.
    Training { step: usize, detail: String },
    /// The gradient oracle detected a broken precondition.
    Oracle(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Lookup { name } => write!(f, "unknown parameter: {name}"),
            Error::Training { step, detail } => {
                write!(f, "training error at step {step}: {detail}")
            }
            Error::Oracle(msg) => write!(f, "oracle error: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
