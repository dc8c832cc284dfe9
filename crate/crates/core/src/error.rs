use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("rank deficient matrix (smallest pivot or singular value {0:.3e})")]
    RankDeficient(f64),

    #[error("constraint violated: |g(q)| = {0:.3e}")]
    ConstraintViolated(f64),

    #[error("output chart invalid: normal component {component:.3e} along axis {axis}")]
    ChartInvalid { axis: usize, component: f64 },

    #[error("evaluation failed: {0}")]
    EvaluationFailed(String),

    #[error("expected dimension {expected}, got {got}")]
    InvalidDimension { expected: usize, got: usize },

    #[error("solution leaves the continuous root branch (endpoint mismatch {0:.3e})")]
    BranchMismatch(f64),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("step {step}: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::StepFailed { .. } => e,
            e => Error::StepFailed { step, source: Box::new(e) },
        }
    }

    /// Innermost error after stripping step annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::StepFailed { source, .. } => source.root(),
            e => e,
        }
    }
}
