use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("k = {k} is out of range for a block of {len} elements")]
    KOutOfRange { k: usize, len: usize },

    #[error("corrupt sparse gradient stream: {0}")]
    CorruptStream(String),

    #[error("gradient contains NaN or Inf, step skipped")]
    SkippedStep,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trace op {op} references unknown resource: {what}")]
    UnknownResource { op: usize, what: String },
}
