use thiserror::Error;

/// Errors raised by the identification toolkit.
#[derive(Debug, Error)]
pub enum JmlsError {
    #[error("matrix is not positive semidefinite (pivot {pivot:.3e} at index {index})")]
    NotPsd { index: usize, pivot: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input")]
    EmptyInput,

    #[error("measurement noise factor is singular for mode {mode}")]
    SingularR { mode: usize },

    #[error("state transform is singular or badly conditioned (condition {condition:.3e})")]
    SingularTransform { condition: f64 },

    #[error("mode count mismatch: {left} vs {right}")]
    ModeCountMismatch { left: usize, right: usize },

    #[error("innovation covariance is not positive definite at step {step}, mode {mode}")]
    DegenerateInnovation { step: usize, mode: usize },

    #[error("all mixture weights are zero")]
    AllZeroWeights,

    #[error("joint predicted covariance is singular at step {step}")]
    SingularPredCov { step: usize },

    #[error("combined expectation factor is broken (lambda'lambda = {0})")]
    LambdaOverflow(f64),

    #[error("mode {mode} is starved of responsibility (effective count {count:.3e})")]
    DegenerateMode { mode: usize, count: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl JmlsError {
    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            JmlsError::NotPsd { .. }
                | JmlsError::SingularR { .. }
                | JmlsError::SingularTransform { .. }
                | JmlsError::DegenerateInnovation { .. }
                | JmlsError::AllZeroWeights
                | JmlsError::SingularPredCov { .. }
                | JmlsError::LambdaOverflow(_)
                | JmlsError::DegenerateMode { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, JmlsError>;
