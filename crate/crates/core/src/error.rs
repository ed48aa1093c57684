use thiserror::Error;

use crate::sinkhorn::SinkhornReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown measure family `{0}`")]
    UnknownFamily(String),

    #[error("invalid parameters for `{family}`: {reason}")]
    InvalidParameters { family: String, reason: String },

    /// A mean or tilt value could not be mapped back into the open domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("tilt {theta} lies outside the open natural-parameter domain ({lo}, {hi})")]
    TiltOutOfDomain { theta: f64, lo: f64, hi: f64 },

    /// A coordinate update pushed the tilt onto the boundary of the domain.
    /// Usually means the margin is not tame, or not feasible at all.
    #[error("boundary escape in {axis} coordinate {index}: target {target} unreachable")]
    BoundaryEscape {
        axis: &'static str,
        index: usize,
        target: f64,
    },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    MaxItersExceeded {
        iterations: usize,
        residual: f64,
        report: Box<SinkhornReport>,
    },

    #[error("infeasible margin: {0}")]
    Infeasible(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("instance too large: {0}")]
    InstanceTooLarge(String),

    #[error("rejection sampler starved: acceptance rate {rate:e} after {attempts} draws")]
    RejectionStarvation { rate: f64, attempts: usize },

    #[error("too few iterations for a rate estimate ({0} usable points)")]
    TooFewIterations(usize),

    #[error("measure `{0}` has unbounded support")]
    UnboundedSupport(String),

    #[error("measure `{0}` is not flagged with increasing, log-convex variance")]
    NotLogConvex(String),

    #[error("margin is not symmetric")]
    AsymmetricMargin,

    #[error("unsupported measure for this operation: {0}")]
    UnsupportedMeasure(String),

    #[error("matrix must be square, got {0}x{1}")]
    NonSquare(usize, usize),

    #[error("empty spectrum")]
    EmptySpectrum,

    #[error("negative eigenvalue {0:e}")]
    NegativeEigenvalue(f64),

    #[error("imaginary part of spectral parameter too small: {0}")]
    ImagTooSmall(f64),

    #[error("Dyson iteration did not converge after {iterations} iterations (residual {residual:e})")]
    DysonNonConvergence { iterations: usize, residual: f64 },

    #[error("instance is not tame: {0}")]
    NotTame(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
