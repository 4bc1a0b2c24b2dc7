use std::io;

use crate::autograd::OpKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{kind}: shape mismatch {shapes:?} ({detail})")]
    ShapeMismatch {
        kind: OpKind,
        shapes: Vec<Vec<usize>>,
        detail: String,
    },

    #[error("{kind}: degenerate sigma (constant input with epsilon 0)")]
    DegenerateSigma { kind: OpKind },

    #[error("degenerate sigma: input vector is constant")]
    ConstantVector,

    #[error("{kind}: {detail}")]
    InvalidOpInput { kind: OpKind, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape; reset it before reuse")]
    BackwardTwice,

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("buffer of length {len} does not fit shape {shape:?}")]
    BufferShape { shape: Vec<usize>, len: usize },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("input sequence of length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("unknown parameter path `{0}`")]
    UnknownPath(String),

    #[error("pattern `{0}` matches no parameters")]
    EmptyPattern(String),

    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),

    #[error("LoRA target `{path}` is not a 2-D weight (shape {shape:?})")]
    NotMatrix { path: String, shape: Vec<usize> },

    #[error("LoRA adapters already injected on `{0}`")]
    DuplicateAdapter(String),

    #[error("LoRA adapters already merged")]
    AlreadyMerged,

    #[error("no materialized gradient for `{0}`")]
    MissingGradient(String),

    #[error("zero-norm representation at layer {0}")]
    ZeroNormRepresentation(usize),

    #[error("layer count mismatch: {0} vs {1}")]
    LayerCountMismatch(usize, usize),

    #[error("schedule step {step} exceeds total {total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("config line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
