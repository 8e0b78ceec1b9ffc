use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can surface.
///
/// Variants are grouped by category so the command-line front end can map
/// them onto stable exit codes (see [`Error::category`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numerical error in {op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("no gradient defined for input {input} of {op}")]
    NoGradient { op: &'static str, input: usize },

    #[error("config error: `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("data error: {path}: row {row}: {detail}")]
    Manifest {
        path: PathBuf,
        row: usize,
        detail: String,
    },

    #[error("data error: {path}: unsupported image: {detail}")]
    UnsupportedImage { path: PathBuf, detail: String },

    #[error("data error: {path}: truncated image")]
    TruncatedImage { path: PathBuf },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: bad magic")]
    BadMagic,

    #[error("checkpoint error: unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint error: truncated file")]
    Truncated,

    #[error("checkpoint error: integrity: {0}")]
    Integrity(String),

    #[error("io error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure class, stable across versions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Config { .. } => Category::Config,
            Error::Shape { .. }
            | Error::NonFinite { .. }
            | Error::Numerical(_)
            | Error::NoGradient { .. } => Category::Numerical,
            _ => Category::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
