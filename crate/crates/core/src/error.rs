use std::path::PathBuf;

/// Errors produced by the engine. Every variant carries enough location
/// information (file, row, class, block) to find the offending data.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {context}: expected {expected}, found {found}")]
    Shape {
        context: String,
        expected: String,
        found: String,
    },

    #[error("degenerate embedding: row {row} of {context} has norm below {eps:e}")]
    DegenerateEmbedding {
        context: String,
        row: usize,
        eps: f64,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid container {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("non-finite value in {path} at flat index {index}")]
    NonFinite { path: PathBuf, index: usize },

    #[error("invalid manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("class {class} has no support shots")]
    MissingSupport { class: usize },

    #[error("support error: {0}")]
    Support(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("transfer error: {0}")]
    Transfer(String),

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
