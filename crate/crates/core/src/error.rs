use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes that an op cannot combine, e.g. a 2x3 / 4x2 matmul.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    /// A malformed row or value in an external file, with its line number.
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("sample `{0}` not found in store")]
    MissingSample(String),

    #[error("sample `{id}` has modality {actual}, expected {expected}")]
    ModalityMismatch {
        id: String,
        expected: &'static str,
        actual: &'static str,
    },

    /// Not enough identities or samples to honor a sampling request.
    #[error("{0}")]
    InsufficientData(String),

    /// NaN or infinity where the computation requires finite values.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
