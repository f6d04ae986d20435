use thiserror::Error;

/// Errors surfaced by the filtering engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("covariance matrix is not positive definite (dimension {dim})")]
    SingularCovariance { dim: usize },

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("all particle weights are zero at time {t}")]
    ParticleCollapse { t: usize },

    #[error("transition sampler produced a non-finite state for member {member} at time {t}")]
    TransitionFailure { member: usize, t: usize },

    #[error("unsupported for this model: {0}")]
    Unsupported(String),

    #[error("NaN encountered in {0}")]
    NotANumber(&'static str),
}

impl FilterError {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        FilterError::Precondition(msg.into())
    }

    /// Numerical failures (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FilterError::SingularCovariance { .. }
                | FilterError::ParticleCollapse { .. }
                | FilterError::TransitionFailure { .. }
                | FilterError::NotANumber(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, FilterError>;
