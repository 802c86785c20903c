use thiserror::Error;

/// Errors raised by the field models, map learning and the estimators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("evaluation point is {distance:.4} m from a source, inside the {radius:.4} m exclusion radius")]
    SourceTooClose { distance: f64, radius: f64 },
    #[error("position ({x:.3}, {y:.3}, {z:.3}) lies outside the map domain")]
    OutOfDomain { x: f64, y: f64, z: f64 },
    #[error("measurement kind {kind} is incompatible with basis {basis}")]
    KindMismatch { kind: String, basis: String },
    #[error("innovation covariance is singular or ill-conditioned (condition {condition:e})")]
    SingularInnovation { condition: f64 },
    #[error("ellipsoid fit is degenerate (condition {condition:e}); insufficient orientation excitation")]
    DegenerateFit { condition: f64 },
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("field gradient is singular (condition {condition:e}); the field is locally uninformative")]
    SingularGradient { condition: f64 },
    #[error("Gauss-Newton did not converge after {iterations} iterations (last step {step:e})")]
    NotConverged { iterations: usize, step: f64 },
    #[error("every particle hit the likelihood floor")]
    AllParticlesDegenerate,
    #[error("local field model diverged: normalized innovation above gate for {steps} consecutive steps")]
    FilterDivergence { steps: usize },
    #[error("timestamp mismatch at row {row}: truth {truth} s, estimate {estimate} s")]
    TimestampMismatch { row: usize, truth: f64, estimate: f64 },
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// True for malformed inputs and configuration, as opposed to failures
    /// that arise while an estimator is running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::TimestampMismatch { .. }
            | Error::KindMismatch { .. } => true,
            Error::AtStep { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
