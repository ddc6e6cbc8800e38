use thiserror::Error;

/// Crate-wide error type. Every fallible public operation returns
/// `Result<T, Error>`; panics are reserved for internal invariant
/// violations.
#[derive(Error, Debug)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("location ({lon}, {lat}) lies outside the mesh hull")]
    OutOfDomain { lon: f64, lat: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("data integrity violation: {0}")]
    DataIntegrity(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("problem size exceeds configured cap: {0}")]
    SizeCap(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact {path}: run `{produced_by}` first")]
    MissingArtifact { path: String, produced_by: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed input at {path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
