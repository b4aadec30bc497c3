use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, FinoError>;

#[derive(Debug, thiserror::Error)]
pub enum FinoError {
    /// Tensor shape violation; `detail` names the offending dimension.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file content (image, tensor dump, checkpoint, config).
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl FinoError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        FinoError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FinoError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        FinoError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
