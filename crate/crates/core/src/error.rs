use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("length mismatch in {op}: expected {expected}, got {actual}")]
    Length {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in tensor `{tensor}`")]
    NonFinite { tensor: String },

    #[error("index {index} out of range 0..{bound} ({what})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("KV cache out of capacity: group {group} holds {length}, appending {requested} exceeds capacity {capacity}")]
    Capacity {
        group: usize,
        length: usize,
        requested: usize,
        capacity: usize,
    },

    #[error("sequence of {length} positions exceeds max_seq {max_seq}")]
    SequenceTooLong { length: usize, max_seq: usize },

    #[error("KV cache state inconsistent: {0}")]
    CacheState(String),

    #[error("parameter compensation infeasible: best relative gap {gap:.3e} exceeds tolerance {tolerance:.1e}")]
    Infeasible { gap: f64, tolerance: f64 },

    #[error("sharing scheme {from} cannot be coarsened into {to}")]
    NotRefinable { from: String, to: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }
}
