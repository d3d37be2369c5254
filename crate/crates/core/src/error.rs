use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: unsupported image: {reason}")]
    UnsupportedImage { path: PathBuf, reason: String },

    #[error("image decode failed: {0}")]
    Decode(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("image {height}x{width} is smaller than required {min}x{min}")]
    TooSmall { height: usize, width: usize, min: usize },

    #[error("duplicate trial: {0}")]
    DuplicateTrial(String),

    #[error("malformed record: {0}")]
    Malformed(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("incomplete tally for content `{content_id}`: {detail}")]
    IncompleteTally { content_id: String, detail: String },

    #[error("session has no sanity trials")]
    NoSanityTrials,

    #[error("missing reference for content `{0}`")]
    MissingReference(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("corrupt parameter blob: {0}")]
    Blob(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Whether the error stems from bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::NonFiniteLoss { .. } | Error::Decode(_)
        )
    }
}
