use thiserror::Error;

/// Crate-wide error type. The stable kebab-case names returned by
/// [`Error::name`] are part of the CLI contract (printed on stderr).
#[derive(Debug, Error)]
pub enum Error {
    #[error("singular-distortion: division denominator {0:.3e} at or below 1e-12")]
    SingularDistortion(f64),
    #[error("out-of-domain: {0}")]
    OutOfDomain(String),
    #[error("behind-camera: point depth {0:.3e} not positive")]
    BehindCamera(f64),
    #[error("degenerate-geometry: {0}")]
    DegenerateGeometry(String),
    #[error("degenerate-sample: design matrix rank below 8")]
    DegenerateSample,
    #[error("degenerate-configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("pose-disambiguation: no cheirality-consistent candidate")]
    PoseDisambiguation,
    #[error("estimation-failed: {0}")]
    EstimationFailed(String),
    #[error("calibration-failed: {0}")]
    CalibrationFailed(String),
    #[error("underconstrained-fit: {0}")]
    UnderconstrainedFit(String),
    #[error("insufficient-overlap: {0}")]
    InsufficientOverlap(String),
    #[error("sync-failed: {0}")]
    SyncFailed(String),
    #[error("init-failed: {0}")]
    InitFailed(String),
    #[error("ba-diverged: {0}")]
    BaDiverged(String),
    #[error("validation-error: {file}:{line}: field `{field}`: {message}")]
    Validation {
        file: String,
        line: usize,
        field: String,
        message: String,
    },
    #[error("config-error: {0}")]
    Config(String),
    #[error("io-error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json-error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable error name, the first token of the display form.
    pub fn name(&self) -> &'static str {
        match self {
            Error::SingularDistortion(_) => "singular-distortion",
            Error::OutOfDomain(_) => "out-of-domain",
            Error::BehindCamera(_) => "behind-camera",
            Error::DegenerateGeometry(_) => "degenerate-geometry",
            Error::DegenerateSample => "degenerate-sample",
            Error::DegenerateConfiguration(_) => "degenerate-configuration",
            Error::PoseDisambiguation => "pose-disambiguation",
            Error::EstimationFailed(_) => "estimation-failed",
            Error::CalibrationFailed(_) => "calibration-failed",
            Error::UnderconstrainedFit(_) => "underconstrained-fit",
            Error::InsufficientOverlap(_) => "insufficient-overlap",
            Error::SyncFailed(_) => "sync-failed",
            Error::InitFailed(_) => "init-failed",
            Error::BaDiverged(_) => "ba-diverged",
            Error::Validation { .. } => "validation-error",
            Error::Config(_) => "config-error",
            Error::Io(_) => "io-error",
            Error::Json(_) => "json-error",
        }
    }

    /// CLI exit code: 2 for validation/config/IO problems, 3 for estimation
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::Config(_) | Error::Io(_) | Error::Json(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
