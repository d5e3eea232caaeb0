use thiserror::Error;

/// Errors raised by the estimation, solver and benchmarking routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not Hermitian (relative asymmetry {0:.3e})")]
    NotHermitian(f64),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("eigenvalue iteration did not converge for a {0}x{0} matrix")]
    EigenNoConvergence(usize),

    #[error("operation requires a uniform linear array")]
    UnsupportedGeometry,

    #[error("invalid model order {order} for an array of {sensors} sensors")]
    InvalidOrder { order: usize, sensors: usize },

    #[error("Vandermonde decomposition of rank {rank} is not unique for {sensors} sensors")]
    NonUniqueDecomposition { rank: usize, sensors: usize },

    #[error("Vandermonde decomposition failed: {0}")]
    DecompositionFailure(String),

    #[error("conic solver failed: {0}")]
    Conic(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
