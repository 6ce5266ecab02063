//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor data length {data_len} does not match shape volume {shape_len}")]
    InvalidShape { shape_len: usize, data_len: usize },

    #[error("{op}: input has {got} channels, expected {expected}")]
    ChannelMismatch {
        op: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("kernel {kh}x{kw} larger than padded input {h}x{w}")]
    KernelTooLarge {
        kh: usize,
        kw: usize,
        h: usize,
        w: usize,
    },

    #[error("{op}: empty batch")]
    EmptyBatch { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },

    #[error("graph was recorded without gradient support")]
    GradUnavailable,

    #[error("parameter {name:?} is trainable but has no gradient")]
    MissingGrad { name: String },

    #[error("dropout probability {p} must lie in [0, 1)")]
    InvalidDropout { p: f64 },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("feature pyramid is missing stage {stage}")]
    MissingStage { stage: usize },

    #[error("cannot split {frames} frames into {k} segments")]
    SegmentCount { frames: usize, k: usize },

    #[error("score fusion weights must be non-negative and not all zero")]
    InvalidWeights,

    #[error("unknown parameter name {name:?}")]
    UnknownParam { name: String },

    #[error("duplicate parameter name {name:?}")]
    DuplicateParam { name: String },

    #[error("{what}: bad magic, expected {expected:?}")]
    BadMagic {
        what: &'static str,
        expected: &'static str,
    },

    #[error("{what}: file truncated or size inconsistent")]
    Truncated { what: &'static str },

    #[error("{what}: non-finite value in file")]
    NonFiniteValue { what: &'static str },

    #[error("motion value {value} overflows the quantized range")]
    MvOverflow { value: i32 },

    #[error("block size {0} unsupported, expected one of 4, 8, 16")]
    BadBlockSize(usize),

    #[error("quantization step {0} must be positive")]
    BadQuantStep(f32),

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint entry {name:?}: shape {found:?} does not match target {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing entry {name:?}")]
    CheckpointMissing { name: String },

    #[error("dataset index line {line} is malformed: {text:?}")]
    BadIndexLine { line: usize, text: String },

    #[error("synthetic config invalid: {reason}")]
    BadSyntheticConfig { reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
