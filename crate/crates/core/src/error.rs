use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("source too short: {len} samples, need at least {min}")]
    SourceTooShort { len: usize, min: usize },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("empty test split")]
    EmptyTestSplit,

    #[error("condition required: model was trained with {0} categories")]
    MissingCondition(usize),

    #[error("unconditional model cannot take a condition")]
    UnexpectedCondition,

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("invalid path spec: {0}")]
    PathSpec(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("audio decode error in {path}: {detail}")]
    Audio { path: PathBuf, detail: String },

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI and the HTTP service.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::SourceTooShort { .. } => "source_too_short",
            Error::EmptyCorpus(_) => "empty_corpus",
            Error::EmptyTestSplit => "empty_test_split",
            Error::MissingCondition(_) => "missing_condition",
            Error::UnexpectedCondition => "unexpected_condition",
            Error::UnknownLabel(_) => "unknown_label",
            Error::PathSpec(_) => "path_spec",
            Error::NonFinite { .. } => "non_finite",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Audio { .. } | Error::Wav(_) => "audio",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
