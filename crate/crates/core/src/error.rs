use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("diffeomorphism violation at {stage} step {step}: min Jacobian determinant {min_jacobian:.3e}")]
    DiffeomorphismViolation {
        stage: &'static str,
        step: usize,
        min_jacobian: f64,
    },

    #[error("undefined correlation: {0} has zero variance")]
    UndefinedCorrelation(&'static str),

    #[error("registration diverged: energy grew for {consecutive} consecutive iterations")]
    NonConvergence { consecutive: usize, trace: Vec<f64> },

    #[error("trajectory is missing intermediates: {0}")]
    MissingIntermediates(&'static str),

    #[error("prior provider failed for subject '{subject_id}' at iteration {iteration}: {message}")]
    Provider {
        subject_id: String,
        iteration: usize,
        message: String,
    },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed file {}: {message}", .path.display())]
    Format { path: PathBuf, message: String },

    #[error("unsupported feature in {}: {field}", .path.display())]
    Unsupported { path: PathBuf, field: String },

    #[error("atlas build aborted at iteration {iteration}: {source}")]
    Build {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// The innermost error, looking through build-context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Build { source, .. } => source.root(),
            other => other,
        }
    }
}
