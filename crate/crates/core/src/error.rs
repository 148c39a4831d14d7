use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token {token} at position {position} is outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, position: usize, vocab: usize },

    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("missing data: {0}")]
    Missing(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-parsable code printed by the CLI before the detail.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidTask(_) => "E_INVALID_TASK",
            Error::InvalidConfig(_) => "E_INVALID_CONFIG",
            Error::Precondition(_) => "E_PRECONDITION",
            Error::SequenceTooLong { .. } => "E_SEQ_TOO_LONG",
            Error::TokenOutOfVocab { .. } => "E_TOKEN_OOV",
            Error::NonFinite { .. } => "E_NON_FINITE",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::LengthMismatch { .. } => "E_LENGTH_MISMATCH",
            Error::OutOfRange(_) => "E_OUT_OF_RANGE",
            Error::Missing(_) => "E_MISSING",
            Error::Format(_) => "E_FORMAT",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
