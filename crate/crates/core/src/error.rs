use thiserror::Error;

/// Errors raised by the solvers and engines.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BloError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid constraint set: {0}")]
    InvalidSet(String),
    #[error("numerical failure at step {step}: {what}")]
    NumericalFailure { step: usize, what: String },
    #[error("not converged after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        /// Best iterate reached, widened to `f64`.
        best: Vec<f64>,
    },
    #[error("Hessian is not positive definite (curvature {curvature:e} at CG iteration {iteration})")]
    IndefiniteHessian { iteration: usize, curvature: f64 },
    #[error("degenerate active set: {0}")]
    DegenerateActiveSet(String),
    #[error("unsupported lower-level map: {0}")]
    UnsupportedMap(String),
    #[error("trajectory is incomplete: {0}")]
    IncompleteTrajectory(String),
    #[error("memory cap exceeded: {needed} scalars requested, cap is {cap}; {hint}")]
    MemoryCap { needed: usize, cap: usize, hint: String },
    #[error("lower-level solution is not unique: {0}")]
    NonUniqueLowerSolution(String),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = BloError> = std::result::Result<T, E>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(BloError::Argument(msg.into()))
}
