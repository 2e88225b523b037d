use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the completion pipeline.
#[derive(Debug, Error)]
pub enum LodeError {
    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },

    #[error("index {index:?} outside grid dims {dims:?}")]
    OutOfRange { index: [i32; 3], dims: [usize; 3] },

    #[error("point ({x}, {y}, {z}) outside scene box")]
    OutsideBox { x: f64, y: f64, z: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u16, classes: usize },

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("stride {stride} not divisible by factor {factor}")]
    StrideNotDivisible { stride: i32, factor: i32 },

    #[error("dims {dims:?} not divisible by {factor}")]
    IndivisibleDims { dims: [usize; 3], factor: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("semantic head absent")]
    NoSemanticHead,

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("degenerate primitive: {0}")]
    DegeneratePrimitive(String),

    #[error("not enough points: need at least {need}, have {have}")]
    NotEnoughPoints { need: usize, have: usize },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated data: {0}")]
    Truncated(String),

    #[error("unknown label id {0} without class map entry")]
    UnknownLabel(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LodeError> = std::result::Result<T, E>;
