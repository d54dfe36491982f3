use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A block Cholesky factorization failed. `stage` is the cyclic-reduction
    /// level (0 = the input matrix) and `block` the block index within that level.
    #[error("matrix is not positive definite (cyclic-reduction stage {stage}, block {block})")]
    NotPositiveDefinite { stage: usize, block: usize },

    #[error("diagonal block {block} is not symmetric")]
    NotSymmetric { block: usize },

    #[error("matrix exponential failed: eigendecomposition is ill-conditioned and the fallback produced non-finite values")]
    DefectiveMatrix,

    #[error("N N^T is singular; the PEG spectrum is undefined")]
    SingularResolvent,

    #[error("celerite term (a={a}, b={b}, c={c}, d={d}) is not positive definite: need |b d| <= a c, a > 0, c >= 0")]
    NotPositiveDefiniteTerm { a: f64, b: f64, c: f64, d: f64 },

    #[error("unsupported spectral-mixture base density: {0}")]
    UnsupportedBase(String),

    #[error("gap {gap:e} at index {index} makes the transition covariance numerically singular")]
    IllConditionedGap { index: usize, gap: f64 },

    #[error("input times are not sorted (first decrease at index {index})")]
    UnsortedInput { index: usize },

    #[error("input is empty")]
    EmptyInput,

    #[error("observation noise covariance Lambda Lambda^T + jitter I is singular; increase jitter")]
    SingularNoise,

    #[error("objective is not finite at a finite-difference probe (coordinate {coordinate})")]
    NonFiniteObjective { coordinate: usize },

    #[error("noise stream exhausted after {drawn} draws")]
    InsufficientNoise { drawn: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn mismatch(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}
