use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing directory: {}", .0.display())]
    MissingDirectory(PathBuf),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("shape mismatch for `{id}`: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        id: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("value out of range in `{id}`: {detail}")]
    OutOfRange { id: String, detail: String },

    #[error("duplicate sample ids: {0:?}")]
    DuplicateIds(Vec<String>),

    #[error("incompatible domain tags: {0}")]
    DomainTag(String),

    #[error("unpaired files: {0:?}")]
    Unpaired(Vec<String>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("architecture mismatch: `{expected}` vs `{actual}`")]
    Architecture { expected: String, actual: String },

    #[error("non-finite value in parameter `{0}`")]
    NonFiniteParameter(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error(
        "non-finite loss at iteration {iteration} (ce={ce}, ea={ea}, sw={sw}); samples: {sample_ids:?}"
    )]
    NonFiniteLoss {
        iteration: u64,
        ce: f64,
        ea: f64,
        sw: f64,
        sample_ids: Vec<String>,
    },

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<serde_yaml::Error> for Error {
    fn from(e: serde_yaml::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
