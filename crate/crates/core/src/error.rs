//! Error types shared across the toolkit.

use thiserror::Error;

/// Unified error type for all engine operations.
///
/// Each variant carries a stable machine-readable code (see [`Error::code`])
/// so batch callers can dispatch without parsing messages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("derivative inconsistency in {field} (direction {direction}): relative error {error:.3e} at point {point:?}")]
    DerivativeInconsistency {
        field: String,
        direction: String,
        error: f64,
        point: Vec<f64>,
    },

    #[error("empty control region: {0}")]
    EmptyControlRegion(String),

    #[error("derivative order {requested} exceeds the limit {limit} for {mode} mode")]
    OrderTooHigh {
        requested: u32,
        limit: u32,
        mode: String,
    },

    #[error("non-finite value at path {path}, step {step} (|x| exceeded {guard:.1e})")]
    NonFinite { path: usize, step: usize, guard: f64 },

    #[error("singular transition matrix at path {path}, step {step}: |det| = {det:.3e}")]
    SingularTransition { path: usize, step: usize, det: f64 },

    #[error("analytic backend unsupported: {0}")]
    BackendUnsupported(String),

    #[error("ill-conditioned regression: {0}")]
    IllConditionedRegression(String),

    #[error("insufficient grid resolution: window {requested:.3e} is below 2*dt = {minimum:.3e}")]
    InsufficientGridResolution { requested: f64, minimum: f64 },

    #[error("unavailable: {0}")]
    Unavailable(String),

    #[error("degenerate probe: {0}")]
    DegenerateProbe(String),

    #[error("insufficient points: {0}")]
    InsufficientPoints(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid problem file: {0}")]
    InvalidProblem(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code for this error.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::DerivativeInconsistency { .. } => "derivative_inconsistency",
            Error::EmptyControlRegion(_) => "empty_control_region",
            Error::OrderTooHigh { .. } => "order_too_high",
            Error::NonFinite { .. } => "non_finite",
            Error::SingularTransition { .. } => "singular_transition",
            Error::BackendUnsupported(_) => "backend_unsupported",
            Error::IllConditionedRegression(_) => "ill_conditioned_regression",
            Error::InsufficientGridResolution { .. } => "insufficient_grid_resolution",
            Error::Unavailable(_) => "unavailable",
            Error::DegenerateProbe(_) => "degenerate_probe",
            Error::InsufficientPoints(_) => "insufficient_points",
            Error::SchemaMismatch(_) => "schema_mismatch",
            Error::InvalidProblem(_) => "invalid_problem",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
