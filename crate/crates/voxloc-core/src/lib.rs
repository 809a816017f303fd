//! Self-supervised pretext training on volumetric images, with zero-label
//! transfer to 3D object localization and volume cropping.
//!
//! The crate provides:
//!
//! - a small reverse-mode autodiff core ([`tape`]) with the Adam optimizer,
//! - volume handling: slicing, rotation with incircle masking, downscaling,
//!   synthetic phantom generation, and file I/O ([`volume`]),
//! - pretext batch samplers for slice sorting and slice-pair rotation
//!   prediction ([`sampling`]),
//! - the training losses and evaluation metrics ([`losses`]),
//! - the two convolutional model heads and checkpointing ([`models`]),
//! - zero-label transfer to bounding boxes via embedding clustering and via
//!   rotation-certainty profiles ([`transfer`]),
//! - lossless cropping with storage-reduction accounting ([`reduce`]),
//! - end-to-end training loops ([`train`]).

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod losses;
pub mod models;
pub mod reduce;
pub mod sampling;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transfer;
pub mod volume;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use volume::{BBox3D, Slice2D, Volume3D};
