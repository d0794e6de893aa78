use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument {arg}: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("missing split {split} under {root}")]
    MissingSplit { split: String, root: PathBuf },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("asset unavailable: {0}")]
    AssetUnavailable(PathBuf),
    #[error("unknown backend id: {0}")]
    UnknownBackend(String),
    #[error("missing artifact: {artifact} (run `{stage}` first)")]
    MissingArtifact { artifact: String, stage: String },
    #[error("serialization error: {0}")]
    Serialization(String),
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("workdir is locked by another process: {0}")]
    Locked(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
