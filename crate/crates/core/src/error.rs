use thiserror::Error;

/// Crate-wide error type. Variants are grouped by how callers recover:
/// validation-class errors mean the inputs were rejected, divergence means a
/// run went numerically bad part-way, and I/O wraps the filesystem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),

    #[error("capacity: {0}")]
    Capacity(String),

    #[error("correspondence: {0}")]
    Correspondence(String),

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("schema: {0}")]
    Schema(String),

    #[error("integrity: {0}")]
    Integrity(String),

    #[error("version: {0}")]
    Version(String),

    #[error("lookup: {0}")]
    Lookup(String),

    #[error("numeric: non-finite activations at layer {layer}")]
    NonFinite { layer: usize },

    #[error("divergence at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
