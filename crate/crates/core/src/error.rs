use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown word `{0}`")]
    UnknownWord(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("timestep {t} outside [1, {max}]")]
    Timestep { t: usize, max: usize },

    #[error("row {row} has zero norm and cannot be projected under cosine distance")]
    DegenerateRow { row: usize },

    #[error("prompt length {len} exceeds encoder capacity {max}")]
    Capacity { len: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("optimization diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid vocabulary: {0}")]
    Vocab(String),

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("adapter protocol: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for errors caused by the optimizer or model producing non-finite numbers.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::NonFinite(_))
    }
}
