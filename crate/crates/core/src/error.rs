use thiserror::Error;

/// Errors raised by model validation, numerics and Monte Carlo estimation.
#[derive(Debug, Error)]
pub enum Error {
    /// A model or scenario violates a structural invariant (bad row sums,
    /// reducible chain, mismatched dimensions, out-of-range parameters).
    #[error("validation error: {0}")]
    Validation(String),

    /// A computation degenerated numerically (zero filter norm, empty
    /// particle system).
    #[error("numeric degeneracy: {0}")]
    Degenerate(String),

    /// An exact computation was requested on an instance above the size guard.
    #[error("instance too large: {0}")]
    TooLarge(String),

    /// A Monte Carlo estimator could not produce an estimate (no completed
    /// trials, no ladder epoch within the step cap, truncation never reached).
    #[error("estimation error: {0}")]
    Estimation(String),

    /// An argument is outside the domain of the requested operation.
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, Error>;
