use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("malformed slice stack: {0}")]
    MalformedStack(String),

    #[error("index out of range: {0}")]
    Range(String),

    #[error("invalid sampling rate: {0}")]
    InvalidRate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model is frozen; weight update rejected")]
    Frozen,

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("missing prior volume for stage {0}")]
    MissingPrior(usize),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("format error in {path}: field `{field}`: {detail}")]
    Format {
        path: PathBuf,
        field: String,
        detail: String,
    },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u64,
        expected: u64,
    },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn format(path: impl Into<PathBuf>, field: &str, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            field: field.to_string(),
            detail: detail.into(),
        }
    }
}
