//! Multi-grained feature integration network for medical image
//! segmentation, built on a small reverse-mode differentiation core.
//!
//! Layout:
//! - [`tensor`], [`autodiff`]: rank-4 tensors and the recording tape.
//! - [`ops`]: convolutions (standard, atrous, depthwise, pointwise,
//!   deformable), BatchNorm, activations, resampling and reshapes.
//! - [`mgfi`], [`ae`], [`network`]: the bottleneck module, the edge head
//!   and the full encoder–decoder.
//! - [`loss`], [`metrics`]: hybrid loss with Canny boundary targets and
//!   the five overlap scores.
//! - [`data`], [`train`]: synthetic data, image and checkpoint files,
//!   augmentation, Adam and the training loop.

pub mod ae;
pub mod autodiff;
pub mod checks;
pub mod data;
pub mod error;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod mgfi;
pub mod network;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, record_begin, GradientMap, Record};
pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
