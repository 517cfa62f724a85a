use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes of two objects that must agree do not.
    #[error("structural error: {0}")]
    Structure(String),

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A function argument violates its contract (bounds, terminal value, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("environment generation failed after {rounds} rounds: {violated}")]
    Generation { rounds: usize, violated: String },

    #[error("design did not converge in {iters} iterations (worst squared norm {worst:.6})")]
    DesignNonConvergence { iters: usize, worst: f64 },

    #[error("design verification failed: {0}")]
    DesignVerification(String),

    #[error("net cardinality {count} exceeds cap {cap}")]
    NetTooLarge { count: usize, cap: usize },

    #[error("instance too large for exhaustive enumeration: {0}")]
    TooLarge(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
