use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing sidecar {0}")]
    MissingSidecar(PathBuf),

    #[error("malformed {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("payload size mismatch: dims require {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("non-finite value in {field}")]
    NonFinite { field: String },

    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimsMismatch { expected: [usize; 3], found: [usize; 3] },

    #[error("shape generation failed: {0}")]
    Generation(String),

    #[error("no valid anomaly location after {attempts} attempts")]
    Location { attempts: usize },

    #[error("voxel {voxel:?} is not covered by any window")]
    Uncovered { voxel: [usize; 3] },

    #[error("average precision is undefined without positive labels")]
    NoPositives,

    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefix the field of an [`Error::Invalid`] with `section.`.
    pub fn within(self, section: &str) -> Self {
        match self {
            Error::Invalid { field, message } if !field.starts_with(&format!("{section}.")) => Error::Invalid {
                field: format!("{section}.{field}"),
                message,
            },
            e => e,
        }
    }

    /// Validation errors (bad input or configuration) as opposed to runtime
    /// and I/O failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid { .. } | Error::Config { .. } | Error::DimsMismatch { .. } | Error::NoPositives
        )
    }
}
