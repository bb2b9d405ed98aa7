use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped so callers (notably the CLI) can map them onto
/// coarse exit categories: anything data-shaped is a validation problem,
/// `NonFinite`/`Diverged` are numeric failures.
#[derive(Debug, Error)]
pub enum NarError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unknown operation name: {0:?}")]
    UnknownOp(String),

    #[error("graph validation failed: {0}")]
    InvalidGraph(String),

    #[error("node index {index} out of range for graph with {n_nodes} nodes")]
    NodeIndexOutOfRange { index: usize, n_nodes: usize },

    #[error("permutation has length {got}, expected {expected}")]
    PermutationLength { expected: usize, got: usize },

    #[error("permutation is not a bijection on [0, {0})")]
    PermutationNotBijective(usize),

    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("search error: {0}")]
    Search(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NarError {
    /// True for failures of the numeric pipeline (as opposed to bad input data).
    pub fn is_numeric(&self) -> bool {
        matches!(self, NarError::NonFinite { .. } | NarError::Diverged(_))
    }
}

pub type Result<T> = std::result::Result<T, NarError>;
