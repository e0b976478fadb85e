use std::path::PathBuf;

/// Errors raised across the crate. Variants map onto the CLI exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable process exit code: 2 config, 3 data, 4 checkpoint, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::InvalidArgument(_) => 2,
            Error::Data(_) | Error::Image { .. } | Error::Shape(_) => 3,
            Error::Checkpoint(_) => 4,
            Error::Numeric(_) => 5,
            Error::Io(_) => 3,
        }
    }

    /// Short machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Json(_) => "config",
            Error::InvalidArgument(_) => "argument",
            Error::Data(_) | Error::Image { .. } | Error::Io(_) => "data",
            Error::Shape(_) => "shape",
            Error::Checkpoint(_) => "checkpoint",
            Error::Numeric(_) => "numeric",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
