use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid detection #{index}: {reason}")]
    InvalidDetection { index: usize, reason: String },

    #[error("degenerate map: {0}")]
    DegenerateMap(String),

    #[error("no fixations: {0}")]
    NoFixations(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("SVD did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("gradient check failed: relative error {worst:e} exceeds {tolerance:e}")]
    GradientCheck { worst: f64, tolerance: f64 },

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        found: [u8; 4],
        expected: [u8; 4],
    },

    #[error("{path}: truncated ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that come from the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::NoConvergence { .. }
                | Error::Diverged { .. }
                | Error::GradientCheck { .. }
                | Error::DegenerateMap(_)
        )
    }
}
