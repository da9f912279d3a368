use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape { what: String, expected: String, actual: String },

    #[error("{what} out of range: {detail}")]
    Range { what: String, detail: String },

    #[error("degenerate input to {0}: zero-norm vector")]
    Degenerate(&'static str),

    #[error("invalid bounding box {0:?}: zero or negative area")]
    InvalidBBox([f64; 4]),

    #[error("invalid face parameters: {0}")]
    InvalidParams(String),

    #[error("non-finite loss term `{term}` at step {step}: {value}")]
    NonFinite { term: &'static str, step: u64, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset item `{item}`: {reason}")]
    Ingest { item: String, reason: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("corrupt latent file: {0}")]
    CorruptLatent(String),

    #[error("{metric} is not implemented: {reason}")]
    NotImplemented { metric: &'static str, reason: &'static str },

    #[error("usage: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("toml parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml encode error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::Shape { what: what.into(), expected: format!("{expected:?}"), actual: format!("{actual:?}") }
    }

    pub(crate) fn range(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Range { what: what.into(), detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
