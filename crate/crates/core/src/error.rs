use thiserror::Error;

/// Errors raised by the library. `is_numerical` separates solver failures
/// from malformed input so callers can map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum MfaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("kernel does not match statistic: {0}")]
    KernelMismatch(String),
    #[error("non-smooth potential kind `{0}` is not supported here")]
    NonSmooth(String),
    #[error("non-convex pairwise potential: {0}")]
    NonConvexPsi2(String),
    #[error("size guard exceeded: {0}")]
    GuardExceeded(String),
    #[error("infeasible velocity grid: {0}")]
    InfeasibleGrid(String),
    #[error("line search failed after {iterations} iterations (best action {best_value})")]
    LineSearchFailure {
        iterations: usize,
        best_value: f64,
        best: Box<crate::nbody::OptimizeReport>,
    },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("singular acceleration system (smallest singular value {smallest_singular_value:e})")]
    SingularSystem { smallest_singular_value: f64 },
    #[error("condition violated: {0}")]
    ConditionViolation(String),
    #[error("Newton velocity recovery failed: {0}")]
    NewtonFailure(String),
    #[error("Picard iteration did not converge (last contraction factor {factor})")]
    PicardNonConvergence { factor: f64 },
    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),
}

impl MfaError {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            MfaError::InvalidInput(_) => "invalid_input",
            MfaError::DimensionMismatch { .. } => "dimension_mismatch",
            MfaError::IndexOutOfRange { .. } => "index_out_of_range",
            MfaError::KernelMismatch(_) => "kernel_mismatch",
            MfaError::NonSmooth(_) => "non_smooth",
            MfaError::NonConvexPsi2(_) => "non_convex_psi2",
            MfaError::GuardExceeded(_) => "guard_exceeded",
            MfaError::InfeasibleGrid(_) => "infeasible_grid",
            MfaError::LineSearchFailure { .. } => "line_search_failure",
            MfaError::NonFinite(_) => "non_finite",
            MfaError::SingularSystem { .. } => "singular_system",
            MfaError::ConditionViolation(_) => "condition_violation",
            MfaError::NewtonFailure(_) => "newton_failure",
            MfaError::PicardNonConvergence { .. } => "picard_non_convergence",
            MfaError::NonConvergence(_) => "non_convergence",
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MfaError::LineSearchFailure { .. }
                | MfaError::NonFinite(_)
                | MfaError::SingularSystem { .. }
                | MfaError::ConditionViolation(_)
                | MfaError::NewtonFailure(_)
                | MfaError::PicardNonConvergence { .. }
                | MfaError::NonConvergence(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, MfaError>;
