//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Input outside an operation's mathematical domain (e.g. log of a
    /// non-positive value).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Input too close to a singularity to normalize (norm below floor).
    #[error("degenerate input in {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    /// A non-finite value appeared where the contract requires finite ones.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// An API contract was violated (wrong handle, non-scalar root, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Tape or merge lifecycle misuse (double backward, stale handle, ...).
    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    /// Invalid configuration value; the message names the field path.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed data (labels out of range, bad bundle bytes, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A checked runtime postcondition did not hold (e.g. a pretrained
    /// backbone below the zero-shot sanity floor).
    #[error("postcondition failed: {0}")]
    Postcondition(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
