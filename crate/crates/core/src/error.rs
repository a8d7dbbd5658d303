use thiserror::Error;

/// Errors raised anywhere in the laboratory.
///
/// Variants map onto the CLI exit codes: configuration problems exit with 2,
/// data problems with 3, judge unavailability with 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("vocab error: unknown word `{0}`")]
    UnknownWord(String),
    #[error("vocab error: token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("length error: sequence of {len} tokens exceeds context length {context_len}")]
    Length { len: usize, context_len: usize },
    #[error("capability error: {0}")]
    Capability(String),
    #[error("judge parse error: {0}")]
    JudgeParse(String),
    #[error("judge unavailable after {attempts} attempts (last reply: {last_raw:?}): {reason}")]
    JudgeUnavailable {
        attempts: usize,
        last_raw: Option<String>,
        reason: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Capability(_) => 2,
            Error::JudgeUnavailable { .. } => 4,
            _ => 3,
        }
    }
}
