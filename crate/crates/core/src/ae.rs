//! Adaptive edge head: offset conv → deformable conv → 1×1 compression to
//! a single-channel edge probability map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mgfi::KERNEL_TAPS;
use crate::ops::{self, ConvParams};
use crate::params::{child, ConvSpec, Module, Visitor};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct AeParams<T: Real = f32> {
    /// `in → 18` offsets, zero at init.
    pub offsets: ConvParams<T>,
    pub deform: ConvParams<T>,
    /// `in → 1`.
    pub compress: ConvParams<T>,
}

impl<T: Real> AeParams<T> {
    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        AeParams {
            offsets: ConvSpec::same(channels, 2 * KERNEL_TAPS, 3).with_bias().zeros(),
            deform: ConvSpec::same(channels, channels, 3).with_bias().init(rng),
            compress: ConvSpec::same(channels, 1, 1).with_bias().init(rng),
        }
    }
}

impl<T: Real> Module<T> for AeParams<T> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.offsets.visit(&child(prefix, "offsets"), f);
        self.deform.visit(&child(prefix, "deform"), f);
        self.compress.visit(&child(prefix, "compress"), f);
    }
}

/// Edge map `(n, 1, h, w)` with values in `(0, 1)`.
pub fn ae_forward<T: Real>(f: &Tensor<T>, p: &AeParams<T>) -> Result<Tensor<T>> {
    if p.offsets.out_channels() != 2 * KERNEL_TAPS || p.compress.out_channels() != 1 {
        return Err(Error::shape("edge head needs 18 offset channels and 1 output channel"));
    }
    if f.shape().c != p.deform.in_channels() {
        return Err(Error::shape(format!("edge head expects {} channels, got {}", p.deform.in_channels(), f.shape())));
    }
    let offsets = ops::conv2d(f, &p.offsets)?;
    let y = ops::deform_conv2d(f, &p.deform, &offsets)?;
    Ok(ops::sigmoid(&ops::pointwise_conv(&y, &p.compress.weight, p.compress.bias.as_ref())?))
}
