use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong while building, fitting or testing a model.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("triangular system is singular (zero diagonal at index {index})")]
    SingularTriangular { index: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{what} is rank deficient (rank {rank}, expected {expected})")]
    RankDeficient {
        what: &'static str,
        rank: usize,
        expected: usize,
    },

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("degenerate response: {0}")]
    DegenerateResponse(&'static str),

    #[error(
        "component {component} is confounded with the fixed effects and earlier components \
         (residual rank does not drop)"
    )]
    ConfoundedDesign { component: usize },

    #[error("variance components lie outside the parameter space")]
    OutsideParameterSpace,

    #[error("non-finite likelihood at tau = {tau:?}")]
    NumericFailure { tau: Vec<f64> },

    #[error("{what} did not converge: {status}")]
    NotConverged { what: &'static str, status: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{failed} of {total} bootstrap replicates failed to converge")]
    BootstrapFailures { failed: usize, total: usize },
}
