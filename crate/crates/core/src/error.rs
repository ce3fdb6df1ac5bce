use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CesError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CesError {
    /// A value lies outside the domain an operation is defined on
    /// (parameter bounds, logit(0), negative variances, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// The forward model produced a non-finite state.
    #[error("forward model evaluation failed at theta = {theta:?}: {reason}")]
    EvaluationFailed { theta: Vec<f64>, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("GP training failed for output dimension {dim}: {reason}")]
    Training { dim: usize, reason: String },

    /// MCMC never accepted a proposal even at the smallest step size.
    #[error("sampler stalled: {0}")]
    SamplerStalled(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A pipeline stage was asked to run before its upstream artifacts exist
    /// or after they changed underneath it.
    #[error("upstream dependency: {0}")]
    Upstream(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },
}

impl CesError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CesError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn artifact(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CesError::Artifact {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the `ces` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            CesError::Config(_) => 2,
            CesError::Upstream(_) => 3,
            CesError::Numerical(_)
            | CesError::Training { .. }
            | CesError::SamplerStalled(_)
            | CesError::EvaluationFailed { .. } => 4,
            _ => 1,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(CesError::Dimension {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
