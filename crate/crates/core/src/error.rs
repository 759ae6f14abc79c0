use thiserror::Error;

/// Errors surfaced by the library. Shape bugs inside a single op are treated
/// as programmer errors and panic via assertions; everything reachable from
/// user-supplied configuration or files goes through this enum.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,

    #[error("empty behavior sequence (valid_len = 0)")]
    EmptyBehavior,

    #[error("non-finite loss at step {step} (batch {batch}, seed {seed}): {detail}")]
    NonFiniteLoss {
        step: u64,
        batch: usize,
        seed: u64,
        detail: String,
    },

    #[error("dataset line {line}: {msg}")]
    DatasetParse { line: usize, msg: String },

    #[error("unknown field `{0}` in dataset record")]
    UnknownField(String),

    #[error("schema hash mismatch: header declares {expected}, computed {got}")]
    SchemaHashMismatch { expected: String, got: String },

    #[error("checkpoint hash mismatch: index built from {expected}, model is {got}")]
    CheckpointHashMismatch { expected: String, got: String },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
