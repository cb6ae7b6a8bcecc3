use thiserror::Error;

/// Errors shared across the solver stack.
#[derive(Error, Debug)]
pub enum Error {
    #[error("value shapes are incompatible: left {left}, right {right}")]
    ShapeMismatch { left: String, right: String },

    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("grid of {got} points per axis is too small for cutoff {cutoff}; need at least {required}")]
    GridTooSmall {
        cutoff: usize,
        required: usize,
        got: usize,
    },

    #[error("numerically resonant mode k = {mode:?}: divisor magnitude {magnitude:.3e} below tolerance {tolerance:.3e}")]
    ResonantMode {
        mode: Vec<i64>,
        magnitude: f64,
        tolerance: f64,
    },

    #[error("matrix has (numerically) repeated eigenvalues; counter-term extraction needs a simple spectrum")]
    RepeatedEigenvalues,

    #[error("eigendecomposition failed: {0}")]
    Eigendecomposition(String),

    #[error("matrix is singular: {context} (pivot/det magnitude {magnitude:.3e})")]
    SingularMatrix { context: String, magnitude: f64 },

    #[error("domain guard violated: {0}")]
    DomainGuard(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    #[error("Newton iteration diverged at step {iteration}: residual grew from {floor:.3e} to {residual:.3e}")]
    Divergence {
        iteration: usize,
        floor: f64,
        residual: f64,
    },

    #[error("twist check failed: |det(mean torsion)| = {det:.3e} below tolerance {tolerance:.3e}")]
    TwistCheckFailed { det: f64, tolerance: f64 },

    #[error("translation parameters violate the admissibility constraints: {0}")]
    ConstraintViolation(String),

    #[error("jet order {order} out of range (degree {degree})")]
    OrderOutOfRange { order: usize, degree: usize },

    #[error("complex eigenvalue pairs are not supported for counter-term extraction")]
    ComplexSpectrumUnsupported,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("arithmetic (Diophantine) gate failed: {0}")]
    ArithmeticGate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
