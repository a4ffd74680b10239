use crate::qp::SolveReport;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Matrix or vector dimensions do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// No power of the input map reaches the output within the search bound.
    #[error("no relative degree: C A^(l-1) B vanished for all l <= {r_max}")]
    NoRelativeDegree { r_max: usize },

    /// A reference map must contain at least one sample.
    #[error("reference map is empty")]
    EmptyMap,

    /// Selection weights summed to zero or below; no barycenter exists.
    #[error("degenerate selection weights at horizon step {step}")]
    DegenerateWeights { step: usize },

    /// A matrix required to be symmetric positive definite failed its
    /// Cholesky factorization.
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    /// An iterative solver hit its iteration cap. Carries the best iterate
    /// found so that callers can degrade gracefully.
    #[error("solver hit its iteration cap at {} iterations (kkt residual {:.3e})",
            .0.iterations, .0.kkt_residual)]
    MaxIterations(Box<SolveReport>),

    /// A neighbor's last known state is too old to forecast from.
    #[error("neighbor information is {age} steps old, beyond the {max_age}-step limit")]
    StaleBeyondHorizon { age: u64, max_age: u64 },

    /// Two weight vectors that must describe the same map differ in length.
    #[error("weight vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    /// Transport marginals do not carry equal total mass.
    #[error("transport marginals differ in total mass by {mismatch:.3e}")]
    InfeasibleMarginals { mismatch: f64 },

    /// Problem size exceeds a documented bound for an exact routine.
    #[error("problem size {size} exceeds the {limit} limit for this routine")]
    ProblemTooLarge { size: usize, limit: usize },

    /// Invalid configuration, model file, or map file.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
