//! One error type for the whole crate, split by failure class so callers can
//! tell a caller bug (shape/parameter/contract) from a runtime problem
//! (numeric blowup, I/O, malformed file).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operands with incompatible shapes; `detail` names both shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A bad argument value (negative temperature, zero batch size, ...).
    #[error("invalid parameter: {0}")]
    Param(String),

    /// An API contract was broken (backward on a non-scalar, missing leaf, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values or other numeric failure at runtime.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A container file that does not parse; offset is in bytes.
    #[error("malformed {what} at byte {offset}: {msg}")]
    Format {
        what: &'static str,
        offset: u64,
        msg: String,
    },

    /// A config file that does not parse; line is 1-based.
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
