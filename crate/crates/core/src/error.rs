use std::path::PathBuf;

/// Crate-wide error type. Every failure carries a stable category string so
/// the CLI can emit a single machine-parsable line on exit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("empty context: no description sentences and no facts")]
    EmptyContext,

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("training failed: {0}")]
    Train(String),

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable category token, one per variant.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::Mask(_) => "mask",
            Error::Contract(_) => "contract",
            Error::Index(_) => "index",
            Error::Parse { .. } => "parse",
            Error::Data(_) => "data",
            Error::EmptyContext => "empty-context",
            Error::Oracle(_) => "oracle",
            Error::Train(_) => "train",
            Error::ModeMismatch(_) => "mode",
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
