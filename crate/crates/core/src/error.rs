use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("dataset at {0} contains no usable images")]
    EmptyDataset(PathBuf),

    #[error("dataset contract violated: {0}")]
    DatasetContract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ill-conditioned airlight {0:?}: every channel must exceed 0.05")]
    IllConditionedAirlight([f32; 3]),

    #[error("critic contract violated: {0}")]
    CriticContract(String),

    #[error("non-finite value in {what} at update {step}")]
    NonFinite { what: String, step: u64 },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointIntegrity(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("I/O error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::Shape {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
