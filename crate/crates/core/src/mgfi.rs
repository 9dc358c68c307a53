//! Multi-grained feature integration (MGFI) bottleneck module.
//!
//! Upper section: overlapping downsample → depthwise-separable local
//! branch → `ReLU(BN(Conv3(F_overlap + F_dw)))` → flatten/transpose
//! residual with `F_overlap`. Lower section: deformable, atrous and
//! standard 3×3 branches, concatenated and compressed by a 1×1 conv.
//!
//! `F_overlap` and `F_dw` are fused by element-wise addition before Conv3.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormState, ConvParams, Mode};
use crate::params::{child, kaiming, ConvSpec, Kind, Module, Visitor};
use crate::tensor::{Real, Shape, Tensor};

/// Taps of the 3×3 kernels used throughout the module.
pub const KERNEL_TAPS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MgfiConfig {
    /// Channels of the incoming feature map. `0` lets the network fill in
    /// its deepest encoder width.
    pub in_channels: usize,
    /// Width of each of the three lower branches.
    pub mid_channels: usize,
    pub atrous_dilation: usize,
    pub kernel_size: usize,
    /// Hidden width of the offset generator of the deformable branch;
    /// `0` maps features to offsets with a single 3×3 conv.
    pub offset_hidden: usize,
}

impl Default for MgfiConfig {
    fn default() -> Self {
        MgfiConfig { in_channels: 0, mid_channels: 32, atrous_dilation: 2, kernel_size: 3, offset_hidden: 0 }
    }
}

impl MgfiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.mid_channels == 0 {
            return Err(Error::invalid("MGFI channel counts must be at least 1"));
        }
        if self.atrous_dilation < 2 {
            return Err(Error::invalid("MGFI atrous dilation must be at least 2"));
        }
        if self.kernel_size != 3 {
            return Err(Error::invalid("MGFI kernels are 3×3"));
        }
        Ok(())
    }
}

/// Generates a `2·K`-channel offset field from features.
#[derive(Clone, Debug)]
pub struct OffsetGenerator<T: Real = f32> {
    pub conv: ConvParams<T>,
    /// Present when the generator has a hidden layer.
    pub project: Option<ConvParams<T>>,
}

impl<T: Real> OffsetGenerator<T> {
    /// Starts at zero so the deformable conv behaves like a standard one.
    pub fn zeroed(cin: usize, hidden: usize) -> Self {
        if hidden == 0 {
            OffsetGenerator { conv: ConvSpec::same(cin, 2 * KERNEL_TAPS, 3).with_bias().zeros(), project: None }
        } else {
            OffsetGenerator {
                conv: ConvSpec::same(cin, hidden, 3).with_bias().zeros(),
                project: Some(ConvSpec::same(hidden, 2 * KERNEL_TAPS, 1).with_bias().zeros()),
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = ops::conv2d(x, &self.conv)?;
        match &self.project {
            None => Ok(y),
            Some(p) => ops::pointwise_conv(&ops::relu(&y), &p.weight, p.bias.as_ref()),
        }
    }
}

impl<T: Real> Module<T> for OffsetGenerator<T> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.conv.visit(&child(prefix, "conv"), f);
        if let Some(p) = self.project.as_mut() {
            p.visit(&child(prefix, "project"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct MgfiUpper<T: Real = f32> {
    pub overlap: ConvParams<T>,
    /// `(c, 1, 3, 3)` per-channel kernels.
    pub depthwise: Tensor<T>,
    pub pointwise: ConvParams<T>,
    pub fuse: ConvParams<T>,
    pub fuse_bn: BatchNormState<T>,
}

#[derive(Clone, Debug)]
pub struct MgfiLower<T: Real = f32> {
    pub offsets: OffsetGenerator<T>,
    pub deform: ConvParams<T>,
    pub atrous: ConvParams<T>,
    pub standard: ConvParams<T>,
    pub compress: ConvParams<T>,
}

/// Weights of one MGFI module. Either section may be absent (ablation).
#[derive(Clone, Debug)]
pub struct MgfiParams<T: Real = f32> {
    pub upper: Option<MgfiUpper<T>>,
    pub lower: Option<MgfiLower<T>>,
}

impl<T: Real> MgfiUpper<T> {
    pub fn init<R: Rng>(c: usize, rng: &mut R) -> Self {
        MgfiUpper {
            overlap: ConvSpec::same(c, c, 3).stride(2).with_bias().init(rng),
            depthwise: kaiming(Shape::new(c, 1, 3, 3), rng),
            pointwise: ConvSpec::same(c, c, 1).with_bias().init(rng),
            fuse: ConvSpec::same(c, c, 3).init(rng),
            fuse_bn: BatchNormState::new(c),
        }
    }
}

impl<T: Real> MgfiLower<T> {
    pub fn init<R: Rng>(cfg: &MgfiConfig, rng: &mut R) -> Self {
        let (c, m) = (cfg.in_channels, cfg.mid_channels);
        MgfiLower {
            offsets: OffsetGenerator::zeroed(c, cfg.offset_hidden),
            deform: ConvSpec::same(c, m, 3).with_bias().init(rng),
            atrous: ConvSpec::same(c, m, 3).dilated(cfg.atrous_dilation).with_bias().init(rng),
            standard: ConvSpec::same(c, m, 3).with_bias().init(rng),
            compress: ConvSpec::same(3 * m, c, 1).with_bias().init(rng),
        }
    }
}

impl<T: Real> MgfiParams<T> {
    pub fn init<R: Rng>(cfg: &MgfiConfig, upper: bool, lower: bool, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(MgfiParams { upper: upper.then(|| MgfiUpper::init(cfg.in_channels, rng)), lower: lower.then(|| MgfiLower::init(cfg, rng)) })
    }

    /// Whether this module halves the spatial resolution.
    pub fn downsamples(&self) -> bool {
        self.upper.is_some()
    }
}

impl<T: Real> Module<T> for MgfiUpper<T> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.overlap.visit(&child(prefix, "overlap"), f);
        f(&child(prefix, "depthwise.weight"), &mut self.depthwise, Kind::Learnable);
        self.pointwise.visit(&child(prefix, "pointwise"), f);
        self.fuse.visit(&child(prefix, "fuse"), f);
        self.fuse_bn.visit(&child(prefix, "fuse_bn"), f);
    }
}

impl<T: Real> Module<T> for MgfiLower<T> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.offsets.visit(&child(prefix, "offsets"), f);
        self.deform.visit(&child(prefix, "deform"), f);
        self.atrous.visit(&child(prefix, "atrous"), f);
        self.standard.visit(&child(prefix, "standard"), f);
        self.compress.visit(&child(prefix, "compress"), f);
    }
}

impl<T: Real> Module<T> for MgfiParams<T> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        if let Some(u) = self.upper.as_mut() {
            u.visit(&child(prefix, "upper"), f);
        }
        if let Some(l) = self.lower.as_mut() {
            l.visit(&child(prefix, "lower"), f);
        }
    }
}

/// Upper section. Returns the residual output and `F_overlap`.
pub fn mgfi_upper<T: Real>(f_in: &Tensor<T>, p: &mut MgfiUpper<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = f_in.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::shape(format!("MGFI input {s} is smaller than 2×2")));
    }
    let f_overlap = ops::overlap_downsample(f_in, &p.overlap)?;
    let local = ops::depthwise_conv2d(&f_overlap, &p.depthwise, 1, 1)?;
    let f_dw = ops::pointwise_conv(&local, &p.pointwise.weight, p.pointwise.bias.as_ref())?;
    if f_dw.shape() != f_overlap.shape() {
        return Err(Error::shape(format!("F_dw {} vs F_overlap {}", f_dw.shape(), f_overlap.shape())));
    }
    let fused = ops::conv2d(&ops::add(&f_overlap, &f_dw)?, &p.fuse)?;
    let f_concat = ops::relu(&ops::batchnorm(&fused, &mut p.fuse_bn, mode)?);
    let os = f_overlap.shape();
    let flat = ops::add(&ops::flatten_transpose(&f_concat), &ops::flatten_transpose(&f_overlap))?;
    let residual = ops::unflatten_transpose(&flat, os.h, os.w)?;
    Ok((residual, f_overlap))
}

/// Lower section: `CONV1×1(Concat(F_deform, F_atrous, F_standard))`.
pub fn mgfi_lower<T: Real>(f: &Tensor<T>, p: &MgfiLower<T>) -> Result<Tensor<T>> {
    let cin = p.deform.in_channels();
    if f.shape().c != cin {
        return Err(Error::shape(format!("MGFI lower expects {cin} channels, got {}", f.shape())));
    }
    let offsets = p.offsets.forward(f)?;
    let f_deform = ops::deform_conv2d(f, &p.deform, &offsets)?;
    let f_atrous = ops::conv2d(f, &p.atrous)?;
    let f_standard = ops::conv2d(f, &p.standard)?;
    assert!(
        f_deform.shape() == f_atrous.shape() && f_atrous.shape() == f_standard.shape(),
        "branch outputs must align: {} {} {}",
        f_deform.shape(),
        f_atrous.shape(),
        f_standard.shape()
    );
    let stacked = ops::concat_channels(&[&f_deform, &f_atrous, &f_standard])?;
    ops::pointwise_conv(&stacked, &p.compress.weight, p.compress.bias.as_ref())
}

/// Full module; sections switched off by ablation are skipped.
pub fn mgfi_forward<T: Real>(f_in: &Tensor<T>, p: &mut MgfiParams<T>, mode: Mode) -> Result<Tensor<T>> {
    let x = match p.upper.as_mut() {
        Some(u) => mgfi_upper(f_in, u, mode)?.0,
        None => f_in.clone(),
    };
    match &p.lower {
        Some(l) => mgfi_lower(&x, l),
        None => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(c: usize) -> MgfiConfig {
        MgfiConfig { in_channels: c, mid_channels: 4, ..MgfiConfig::default() }
    }

    fn input(shape: Shape, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = MgfiParams::<f32>::init(&cfg(8), true, true, &mut rng).unwrap();
        let x = input(Shape::new(1, 8, 64, 64), 2);
        let (r, o) = mgfi_upper(&x, p.upper.as_mut().unwrap(), Mode::Train).unwrap();
        assert_eq!(r.shape(), Shape::new(1, 8, 32, 32));
        assert_eq!(o.shape(), Shape::new(1, 8, 32, 32));
        let y = mgfi_lower(&r, p.lower.as_ref().unwrap()).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 8, 32, 32));
        assert_eq!(mgfi_forward(&x, &mut p, Mode::Train).unwrap().shape(), Shape::new(1, 8, 32, 32));
        let odd = input(Shape::new(1, 8, 9, 7), 3);
        assert_eq!(mgfi_forward(&odd, &mut p, Mode::Eval).unwrap().shape(), Shape::new(1, 8, 5, 4));
    }

    #[test]
    fn zero_fuse_weights_collapse_to_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut up = MgfiUpper::<f32>::init(4, &mut rng);
        up.fuse.weight = Tensor::zeros(up.fuse.weight.shape());
        let x = input(Shape::new(2, 4, 8, 8), 6);
        for mode in [Mode::Train, Mode::Eval] {
            let (r, o) = mgfi_upper(&x, &mut up.clone(), mode).unwrap();
            assert_eq!(r.data(), o.data());
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = MgfiParams::<f32>::init(&cfg(4), true, true, &mut rng).unwrap();
        assert!(mgfi_forward(&input(Shape::new(1, 3, 8, 8), 1), &mut p, Mode::Eval).is_err());
        assert!(mgfi_forward(&input(Shape::new(1, 4, 1, 8), 1), &mut p, Mode::Eval).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MgfiConfig { atrous_dilation: 1, ..cfg(4) }.validate().is_err());
        assert!(MgfiConfig { in_channels: 0, ..cfg(4) }.validate().is_err());
        assert!(cfg(4).validate().is_ok());
    }
}
