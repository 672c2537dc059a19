use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("node {0} is not a leaf")]
    NotLeaf(usize),
    #[error("codebook row {row} is not sorted ascending")]
    UnsortedCodebook { row: usize },
    #[error("empty codebook")]
    EmptyCodebook,
    #[error("index {index} does not fit in {bits} bits")]
    IndexOutOfRange { index: u32, bits: u32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("optimization diverged at step {step}: loss {loss} exceeds 1000x initial {initial}")]
    Divergence { step: usize, loss: f64, initial: f64 },
    #[error("malformed artifact: {0}")]
    Artifact(String),
    #[error("malformed data at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },
}
