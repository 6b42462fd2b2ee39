use thiserror::Error;

/// Errors raised by the library.
///
/// Variants are split between caller mistakes (bad shapes, unknown ids,
/// invalid configs) and numerical failures, so front ends can map them to
/// different exit codes with [`CcbmError::is_numerical`].
#[derive(Debug, Error)]
pub enum CcbmError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range (bound {bound}) for {what}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("unknown sample id {0}")]
    UnknownId(u64),

    #[error("duplicate sample id {0}")]
    DuplicateId(u64),

    #[error("empty request: {0}")]
    EmptyRequest(String),

    #[error("parameter count {dim} exceeds the dense curvature limit {limit}")]
    DenseLimit { dim: usize, limit: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("curvature matrix is singular: {0}")]
    Singular(String),

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CcbmError {
    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CcbmError::NonFinite(_) | CcbmError::Singular(_) | CcbmError::Eigen(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CcbmError>;
