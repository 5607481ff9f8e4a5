use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),

    #[error("invalid input volume: {0}")]
    InvalidVolume(String),

    #[error("brick coordinate {coord:?} outside grid {grid:?}")]
    BrickOutOfRange { coord: [u32; 3], grid: [u32; 3] },

    #[error("brick id field out of range: {0}")]
    BrickIdRange(String),

    #[error("brick decode failed: {0}")]
    Decode(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid metadata: min {min} > max {max}")]
    Metadata { min: u8, max: u8 },

    #[error("channel {channel} out of range (dataset has {count})")]
    ChannelRange { channel: u32, count: u32 },

    #[error("invalid camera: {0}")]
    Camera(String),

    #[error("fetch failed: {0}")]
    Fetch(#[from] crate::service::FetchError),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
