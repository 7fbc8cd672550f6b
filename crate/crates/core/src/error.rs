//! Error taxonomy shared by every module in the crate.
//!
//! Errors fall into three coarse groups that the CLI maps onto process exit
//! codes: configuration/usage problems (exit 2), lifecycle/state violations
//! (exit 3), and data/format problems including shape, norm and finiteness
//! failures (exit 4).

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or usage (bad flag values, inconsistent options).
    #[error("config error: {0}")]
    Config(String),

    /// Lifecycle violation: an object was used outside its valid state
    /// (consumed compute record, step without gradients, missing stage-1
    /// artifact, ...).
    #[error("state error: {0}")]
    State(String),

    /// Tensor shape or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A zero-norm vector was passed where a direction is required.
    #[error("zero-norm vector: {0}")]
    Norm(String),

    /// A serialized artifact violates its format contract; the message names
    /// the offending field.
    #[error("format error: {0}")]
    Format(String),

    /// Dataset-level violation: dangling ids, fold leakage, empty classes.
    #[error("data error: {0}")]
    Data(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::State(_) => 3,
            Error::Shape(_)
            | Error::NonFinite(_)
            | Error::Norm(_)
            | Error::Format(_)
            | Error::Data(_)
            | Error::Io(_) => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_taxonomy() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::State("x".into()).exit_code(), 3);
        assert_eq!(Error::Shape("x".into()).exit_code(), 4);
        assert_eq!(Error::NonFinite("x".into()).exit_code(), 4);
        assert_eq!(Error::Norm("x".into()).exit_code(), 4);
        assert_eq!(Error::Format("x".into()).exit_code(), 4);
        assert_eq!(Error::Data("x".into()).exit_code(), 4);
    }

    #[test]
    fn messages_carry_context() {
        let e = Error::Format("bank dim field: expected 64, found 0".into());
        assert!(e.to_string().contains("dim"));
    }
}
