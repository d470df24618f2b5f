use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// [`Error::is_io`] separates filesystem failures from validation failures so
/// front ends can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("bad tensor magic {found:02x?}, expected \"PVT1\"")]
    BadMagic { found: Vec<u8> },

    #[error("unknown tensor dtype code {0}")]
    UnknownDtype(u32),

    #[error("truncated {what}: need {needed} bytes, have {available}")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("tensor payload has {extra} trailing bytes")]
    TrailingBytes { extra: usize },

    #[error("PNG decode error: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("PNG encode error: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error("unsupported PNG layout: {0}")]
    PngLayout(String),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("segment id {0} present in pixels but missing from segments_info")]
    MissingSegment(u32),

    #[error("duplicate segment id {0} in segments_info")]
    DuplicateSegment(u32),

    #[error("frame index {index} at position {position} is not greater than its predecessor")]
    FrameOrder { index: u64, position: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub fn shape(context: &'static str, expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for filesystem failures, false for anything caused by the content
    /// of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
