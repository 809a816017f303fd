//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by volume I/O, model execution, and the transfer pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes are incompatible; names the offending dimension.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Classification label outside `[0, num_classes)`.
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    /// Backward pass requested on a non-scalar value.
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    /// Ranks passed to a ranking loss must form a permutation.
    #[error("ranks are not a permutation of 0..{len}: {detail}")]
    InvalidRanks { len: usize, detail: String },

    /// Slice or voxel index outside the volume.
    #[error("index {index} out of range on axis {axis} (extent {extent})")]
    IndexOutOfRange {
        axis: usize,
        index: usize,
        extent: usize,
    },

    /// File does not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    /// Header line is present but malformed or inconsistent.
    #[error("bad header: {0}")]
    BadHeader(String),

    /// Payload shorter (or longer) than the header promises.
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    /// A shape with a zero extent, or one inconsistent with the payload.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Metric or classifier input contains a single class only.
    #[error("need both classes present: {0}")]
    SingleClass(String),

    /// Localization failed to find any object evidence.
    #[error("no object found: {0}")]
    NoObject(String),

    /// Invalid argument or configuration value.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
