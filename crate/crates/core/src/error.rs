use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed ABST payload; `field` names the offending header field.
    #[error("tensor format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate vector (norm {norm:e})")]
    DegenerateVector { norm: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("backend error ({model}): {detail}")]
    Backend { model: String, detail: String },

    #[error("catalog error: {0}")]
    Catalog(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    /// A failure that aborted a dataset run, tagged with the image being processed.
    #[error("while processing {image}: {source}")]
    InImage {
        image: String,
        #[source]
        source: Box<Error>,
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

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }
}
