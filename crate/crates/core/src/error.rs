use std::io;
use std::path::PathBuf;

use crate::metadata::MetadataError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("invalid image {}: {reason}", path.display())]
    Image { path: PathBuf, reason: String },

    #[error("invalid video {}: {reason}", path.display())]
    Video { path: PathBuf, reason: String },

    #[error("dimension mismatch: expected {expected_w}x{expected_h}, got {actual_w}x{actual_h}")]
    DimensionMismatch {
        expected_w: usize,
        expected_h: usize,
        actual_w: usize,
        actual_h: usize,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{}:{line}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error(transparent)]
    Metadata(#[from] MetadataError),

    #[error("malformed container: {0}")]
    Container(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("encoder failed for {context}: {reason}")]
    Encoder { context: String, reason: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error(
        "refusing upward transcode: requested {requested_kbps} kbps is not below the current \
         target of {current_kbps} kbps (squeeze only lowers quality)"
    )]
    UpwardTranscode { current_kbps: u32, requested_kbps: u32 },

    #[error("segment {index}: {source}")]
    Segment {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: (usize, usize), actual: (usize, usize)) -> Self {
        Error::DimensionMismatch {
            expected_w: expected.0,
            expected_h: expected.1,
            actual_w: actual.0,
            actual_h: actual.1,
        }
    }

    pub(crate) fn in_segment(self, index: usize) -> Self {
        match self {
            e @ Error::Segment { .. } => e,
            e => Error::Segment {
                index,
                source: Box::new(e),
            },
        }
    }
}
