//! Differentiable neural operators.

use std::cell::Cell;

mod basic;
pub mod conv;
pub mod deform;
pub mod norm;
pub mod resample;

pub use basic::{
    add, concat_channels, flatten_transpose, mean, mul, relu, reshape, scale, sigmoid, slice_channels, softmax_channels, sub, sum,
    unflatten_transpose,
};
pub use conv::{conv2d, depthwise_conv2d, overlap_downsample, pointwise_conv, ConvParams};
pub use deform::{bilinear_sample, deform_conv2d};
pub use norm::{batchnorm, BatchNormState, Mode};
pub use resample::{resize_plane, upsample_bilinear};

thread_local! {
    static MACS: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn count_macs(n: usize) {
    MACS.with(|m| {
        if let Some(v) = m.get() {
            m.set(Some(v + n as u64));
        }
    });
}

/// Runs `f` and returns its result together with the number of
/// multiply-accumulates spent in convolutions on this thread.
pub fn measure_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = MACS.with(|m| m.replace(Some(0)));
    let r = f();
    let total = MACS.with(|m| m.replace(prev)).unwrap_or(0);
    (r, total)
}
