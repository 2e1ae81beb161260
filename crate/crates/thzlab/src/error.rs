use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected \"THZT\"")]
    BadMagic { path: PathBuf },

    #[error("truncated payload in {path}: expected {expected} bytes, got {got}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },

    #[error("unknown dtype code {code} in {path}")]
    UnknownDtype { path: PathBuf, code: u16 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
