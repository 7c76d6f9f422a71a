use thiserror::Error;

/// Errors raised by the basis, emulation and calibration operations.
#[derive(Debug, Error)]
pub enum CalError {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("weight matrix is not positive definite (Cholesky factorization failed)")]
    NotPositiveDefinite,

    #[error("basis is rank deficient: Gram matrix is singular")]
    RankDeficientBasis,

    #[error("ensemble has no variability (zero centred norm)")]
    DegenerateEnsemble,

    #[error("dependent column {index} in Gram-Schmidt (pivot below tolerance)")]
    DependentColumn { index: usize },

    #[error("variance constraint infeasible: v_k = {requested} exceeds attainable maximum {attainable}")]
    InfeasibleVariance { requested: f64, attainable: f64 },

    #[error("terminal case: full-basis reconstruction error {error} exceeds bound {bound}")]
    TerminalCase { error: f64, bound: f64 },

    #[error("quantile level {0} outside (0, 1)")]
    InvalidLevel(f64),

    #[error("total covariance is not positive definite")]
    NonPdCovariance,

    #[error("emulator has not been fitted")]
    UnfittedEmulator,

    #[error("covariance matrix too ill-conditioned (condition estimate {condition:.3e}); increase the nugget")]
    IllConditioned { condition: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, CalError>;
