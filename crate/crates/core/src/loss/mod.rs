//! Hybrid segmentation loss: cross-entropy + Dice + λ·boundary Dice.

mod canny;

pub use canny::{canny, canny_plane, label_boundary, CannyConfig};

use crate::autodiff::record_op;
use crate::error::{Error, Result};
use crate::mask::{BoundaryMask, LabelMask, Mask};
use crate::ops;
use crate::tensor::{Real, Shape, Tensor};

/// Probabilities are clamped to this floor before the logarithm.
pub const PROB_FLOOR: f64 = 1e-7;
/// Added to Dice denominators.
pub const DICE_SMOOTH: f64 = 1e-6;

fn check_spatial<T: Real>(probs: &Tensor<T>, m: &Mask) -> Result<()> {
    let s = probs.shape();
    if (s.n, s.h, s.w) != (m.n, m.h, m.w) {
        return Err(Error::shape(format!("prediction {s} vs mask {}", m.shape())));
    }
    Ok(())
}

fn scalar_op<T: Real>(value: f64, input: &Tensor<T>, grad: Vec<f64>) -> Tensor<T> {
    record_op(Shape::SCALAR, vec![T::of(value)], &[input], move |g, _| {
        let g0 = g[0].f64();
        vec![Some(grad.iter().map(|&d| T::of(g0 * d)).collect())]
    })
}

fn cross_entropy_parts<T: Real>(probs: &Tensor<T>, labels: &LabelMask) -> Result<(Tensor<T>, f64)> {
    check_spatial(probs, labels)?;
    let s = probs.shape();
    labels.check_classes(s.c)?;
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let d = probs.data();
    let mut total = 0.0;
    let mut grad = vec![0.0; s.numel()];
    for (i, &l) in labels.data.iter().enumerate() {
        let idx = ((i / plane) * s.c + l as usize) * plane + i % plane;
        let o = d[idx].f64();
        total -= o.max(PROB_FLOOR).ln();
        if o > PROB_FLOOR {
            grad[idx] = -1.0 / (o * count);
        }
    }
    let value = total / count;
    Ok((scalar_op(value, probs, grad), value))
}

/// Batch-level Dice loss of one channel of `pred` against a binary target.
fn dice_channel(pred: &[f64], target: impl Fn(usize) -> bool) -> (f64, Vec<f64>) {
    let (mut inter, mut g_sum, mut o_sum) = (0.0, 0.0, 0.0);
    for (i, &o) in pred.iter().enumerate() {
        if target(i) {
            inter += o;
            g_sum += 1.0;
        }
        o_sum += o;
    }
    let denom = g_sum + o_sum + DICE_SMOOTH;
    let loss = 1.0 - 2.0 * inter / denom;
    let grad = (0..pred.len()).map(|i| -2.0 * ((target(i) as u8 as f64) * denom - inter) / (denom * denom)).collect();
    (loss, grad)
}

/// Values of channel `c` over the whole batch, plus their flat indices.
fn channel_values<T: Real>(x: &Tensor<T>, c: usize) -> (Vec<f64>, Vec<usize>) {
    let s = x.shape();
    let idx: Vec<usize> = (0..s.n).flat_map(|n| (n * s.c + c) * s.plane()..(n * s.c + c + 1) * s.plane()).collect();
    (idx.iter().map(|&i| x.data()[i].f64()).collect(), idx)
}

fn dice_parts<T: Real>(probs: &Tensor<T>, labels: &LabelMask) -> Result<(Tensor<T>, f64)> {
    check_spatial(probs, labels)?;
    let s = probs.shape();
    labels.check_classes(s.c)?;
    let classes = s.c.max(2) - 1;
    let mut grad = vec![0.0; s.numel()];
    let mut total = 0.0;
    for c in (s.c - classes)..s.c {
        let (vals, idx) = channel_values(probs, c);
        let (loss, g) = dice_channel(&vals, |i| labels.data[i] as usize == c);
        total += loss;
        for (k, gi) in idx.into_iter().zip(g) {
            grad[k] = gi / classes as f64;
        }
    }
    let value = total / classes as f64;
    Ok((scalar_op(value, probs, grad), value))
}

fn boundary_parts<T: Real>(edge: &Tensor<T>, gt: &BoundaryMask) -> Result<(Tensor<T>, f64)> {
    if edge.shape() != gt.shape() {
        return Err(Error::shape(format!("edge map {} vs boundary {}", edge.shape(), gt.shape())));
    }
    let vals = edge.to_f64();
    let (value, grad) = dice_channel(&vals, |i| gt.data[i] != 0);
    Ok((scalar_op(value, edge, grad), value))
}

/// Mean negative log-probability of the labelled class over every pixel.
pub fn cross_entropy<T: Real>(probs: &Tensor<T>, labels: &LabelMask) -> Result<Tensor<T>> {
    Ok(cross_entropy_parts(probs, labels)?.0)
}

/// `1 − 2Σg·o / (Σg + Σo + ε)` per foreground class over the batch,
/// averaged over classes `1..C`.
pub fn dice_loss<T: Real>(probs: &Tensor<T>, labels: &LabelMask) -> Result<Tensor<T>> {
    Ok(dice_parts(probs, labels)?.0)
}

/// Dice-form loss between a single-channel edge map and its target.
pub fn boundary_loss<T: Real>(edge: &Tensor<T>, gt: &BoundaryMask) -> Result<Tensor<T>> {
    Ok(boundary_parts(edge, gt)?.0)
}

#[derive(Clone, Debug)]
pub struct HybridLoss<T: Real = f32> {
    /// Differentiable total for backpropagation.
    pub tensor: Tensor<T>,
    /// `ce + dice + λ·boundary`, in 64-bit.
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub boundary: f64,
}

/// Without an edge map the boundary term is zero.
pub fn hybrid_loss<T: Real>(
    probs: &Tensor<T>,
    edge: Option<&Tensor<T>>,
    labels: &LabelMask,
    boundary: &BoundaryMask,
    lambda: f64,
) -> Result<HybridLoss<T>> {
    let (ce_t, ce) = cross_entropy_parts(probs, labels)?;
    let (dice_t, dice) = dice_parts(probs, labels)?;
    let mut tensor = ops::add(&ce_t, &dice_t)?;
    let mut b = 0.0;
    if let Some(e) = edge {
        let (b_t, bv) = boundary_parts(e, boundary)?;
        tensor = ops::add(&tensor, &ops::scale(&b_t, lambda))?;
        b = bv;
    }
    Ok(HybridLoss { tensor, total: ce + dice + lambda * b, ce, dice, boundary: b })
}
