//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across kernel evaluation, fitting,
/// bandwidth selection, inference, simulation, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Bandwidths must be strictly positive.
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),

    /// Adaptive quadrature could not reach the requested tolerance.
    #[error("quadrature failed to reach tolerance {tol} on [{a}, {b}]")]
    QuadratureFailure { a: f64, b: f64, tol: f64 },

    /// Model dimensions are inconsistent or unsupported.
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    /// A response value is incompatible with the expert family.
    #[error("invalid response {y} for {family}")]
    InvalidResponse { y: f64, family: String },

    /// No observation has positive kernel weight at a grid point.
    #[error("no effective samples at grid point u = {u} with bandwidth {h}")]
    NoEffectiveSamples { u: f64, h: f64 },

    /// The index variable is constant, so it cannot be rescaled to [0, 1].
    #[error("degenerate index: all values equal {0}")]
    DegenerateIndex(f64),

    /// Newton's method could not make progress even with maximal damping.
    #[error("singular Hessian in local solve at grid point u = {u}")]
    SingularHessian { u: f64 },

    /// Input data failed validation.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Cross-validation needs at least a few observations.
    #[error("insufficient data for cross-validation: n = {0} < 3")]
    InsufficientData(usize),

    /// Every leave-one-out fold failed to refit.
    #[error("all cross-validation folds failed at h = {0}")]
    AllFoldsFailed(f64),

    /// The pilot bandwidth for bias estimation must exceed the fit bandwidth.
    #[error("pilot bandwidth {pilot} must exceed fit bandwidth {h}")]
    PilotTooSmall { pilot: f64, h: f64 },

    /// Band critical values require h < 1 so that log(1/h) > 0.
    #[error("asymptotic band requires bandwidth < 1, got {0}")]
    BandwidthGeqOne(f64),

    /// Bootstrap needs enough replicates for a stable variance or quantile.
    #[error("too few bootstrap replicates: {given} (need at least {need})")]
    TooFewReplicates { given: usize, need: usize },

    /// Too many bootstrap or study replicates failed to fit.
    #[error("{failed} of {total} replicates failed (more than {limit_pct}% allowed)")]
    TooManyFailures { failed: usize, total: usize, limit_pct: u32 },

    /// A coefficient name did not parse or is out of range for the model.
    #[error("unknown coefficient {0:?}")]
    UnknownCoefficient(String),

    /// Paired sequences that must have equal lengths do not.
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    /// Curve evaluation outside the index domain.
    #[error("query point u = {0} outside [0, 1]")]
    OutOfDomain(f64),

    /// Malformed input file.
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },

    /// Structurally valid file with the wrong shape or headers.
    #[error("schema error: {0}")]
    SchemaError(String),

    /// Wrapped I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Wrapped CSV encoding failure.
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
