use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("affine projection inconsistent: residual {residual:e} exceeds tolerance {tolerance:e}")]
    Inconsistent { residual: f64, tolerance: f64 },
    #[error("observation x = {x} lies outside the support of the density")]
    OutsideSupport { x: f64 },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("tape was recorded against state version {tape}, state is now at version {state}")]
    StaleTape { tape: u64, state: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
