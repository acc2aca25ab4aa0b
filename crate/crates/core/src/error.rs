use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("symbol index {index} out of range for {levels} levels")]
    SymbolOutOfRange { index: usize, levels: usize },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },

    #[error("truncated input: needed {needed} bytes at offset {offset}, have {available}")]
    Truncated { needed: usize, offset: usize, available: usize },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("entropy model hash mismatch: stream {stream:016x}, model {model:016x}")]
    ModelHashMismatch { stream: u64, model: u64 },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
