//! Error taxonomy shared across the crate.
//!
//! Two classes matter to callers: data errors (malformed or unusable input)
//! and numerical errors (a computation that cannot proceed, e.g. a singular
//! covariance). The CLI maps them to distinct exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data is malformed or violates a precondition.
    #[error("data error: {0}")]
    Data(String),

    /// A numerical routine failed beyond what ridge terms can absorb.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
