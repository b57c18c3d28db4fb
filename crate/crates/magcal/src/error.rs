use thiserror::Error;

/// Errors surfaced by the calibration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A rotation-valued quantity left the domain where the estimator's
    /// derivatives are valid (relative rotation angle reached pi).
    #[error("rotation angle {angle} rad is outside the admissible range (< pi)")]
    RotationOutOfRange { angle: f64 },

    #[error("input is empty or too short: {context}")]
    TooFewSamples { context: &'static str },

    #[error("no stationary span detected at the start of the dataset")]
    NoStationarySpan,

    #[error("quadric fit is degenerate: {reason}")]
    DegenerateQuadric { reason: &'static str },

    #[error("insufficient rotational excitation: {context}")]
    InsufficientExcitation { context: &'static str },

    #[error("filter covariance lost positive semidefiniteness at step {step}")]
    FilterDivergence { step: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    /// The damped normal equations could not be factorized. The optimizer
    /// retries internally with a larger damping parameter; seeing this from a
    /// public entry point means the system is numerically singular.
    #[error("normal equations are not positive definite")]
    IndefiniteSystem,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Format(String),

    #[error("timestamps are not monotonically increasing at row {row}")]
    NonMonotoneTime { row: usize },

    #[error("timestamp spacing at row {row} deviates from the nominal rate")]
    NonUniformTime { row: usize },

    #[error("magnetometer presence pattern is inconsistent with rate ratio {ratio}")]
    InconsistentRatio { ratio: usize },

    #[error("metadata sidecar disagrees with the dataset: {0}")]
    MetaMismatch(String),

    #[error("dataset digest mismatch: report was produced from different data")]
    DigestMismatch,

    /// A comparison sweep aborted because a method failed on most runs.
    #[error("comparison aborted: {0}")]
    Comparison(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
