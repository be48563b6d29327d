use thiserror::Error;

/// Errors raised by the solvers and the problem-file layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("alphabet mismatch: {0}")]
    DimensionMismatch(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("transport simplex failed to terminate after the perturbation fallback")]
    NumericalDegeneracy,

    #[error("source point {0} has no finite-cost target")]
    EmptyFeasible(usize),

    #[error("multiplier bisection stalled at lambda = {lambda} (certificate gap {gap:e})")]
    BisectionStall { lambda: f64, gap: f64 },

    #[error("enumeration of {count} deterministic maps exceeds the limit of {limit}")]
    TooLarge { count: f64, limit: u64 },

    #[error("syntax error: {0}")]
    Syntax(String),

    #[error("validation error at `{path}`: {message}")]
    Validation { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Error {
    Error::Invalid {
        what,
        reason: reason.into(),
    }
}
