use crate::scheme::UnitIndex;

/// Errors raised by the cross-validation engine and its building blocks.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate weights")]
    DegenerateWeights,
    #[error("tail too small: {0} exceedances, need at least 5")]
    TailTooSmall(usize),
    #[error("empty group {0}")]
    EmptyGroup(usize),
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite log-likelihood at unit {0}")]
    NonFiniteLogLik(UnitIndex),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("non-finite target density at initial point")]
    NonFiniteInit,
    #[error("model `{model}` does not support {what}")]
    Unsupported { model: &'static str, what: &'static str },
    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: Box<Error> },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
