use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("ensemble has {members} member(s); at least {required} required")]
    DegenerateEnsemble { members: usize, required: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("implicit midpoint solve did not converge after {iterations} iterations (residual {residual:e})")]
    IntegrationFailure { iterations: usize, residual: f64 },

    #[error("marginals do not match: row mass {rows}, column mass {cols}")]
    MarginalMismatch { rows: f64, cols: f64 },

    #[error("invalid marginal: {0}")]
    InvalidMarginal(String),

    #[error("epsilon {epsilon} too large: epsilon * max weight = {product} > 1")]
    InvalidEpsilon { epsilon: f64, product: f64 },

    #[error("importance weights collapsed: no finite log-likelihood")]
    WeightCollapse,

    #[error("{method} did not converge after {iterations} iterations (error {error:e})")]
    NonConvergence {
        method: &'static str,
        iterations: usize,
        error: f64,
    },

    #[error("matrix decomposition failed: {0}")]
    Decomposition(String),

    #[error("observation model has no observation locations")]
    MissingObservationLocations,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
