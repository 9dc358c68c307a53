//! Named parameter traversal and initialization helpers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::{BatchNormState, ConvParams};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Updated by the optimizer.
    Learnable,
    /// Running statistics; saved in checkpoints but never differentiated.
    Buffer,
}

pub type Visitor<'a, T> = dyn FnMut(&str, &mut Tensor<T>, Kind) + 'a;

/// A parameter container with a stable, deterministic naming order.
pub trait Module<T: Real> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>);

    /// `(name, tensor, kind)` for every tensor in visiting order.
    fn named_tensors(&self) -> Vec<(String, Tensor<T>, Kind)>
    where
        Self: Clone,
    {
        let mut out = Vec::new();
        self.clone().visit("", &mut |name, t, kind| out.push((name.to_string(), t.clone(), kind)));
        out
    }

    fn learnables(&self) -> Vec<Tensor<T>>
    where
        Self: Clone,
    {
        self.named_tensors().into_iter().filter(|(_, _, k)| *k == Kind::Learnable).map(|(_, t, _)| t).collect()
    }

    /// Replaces every learnable tensor, in visiting order.
    fn set_learnables(&mut self, values: &[Tensor<T>]) -> Result<()> {
        let mut it = values.iter();
        let mut err = None;
        self.visit("", &mut |name, t, kind| {
            if kind != Kind::Learnable || err.is_some() {
                return;
            }
            match it.next() {
                Some(v) if v.shape() == t.shape() => *t = v.clone(),
                Some(v) => err = Some(Error::shape(format!("{name}: {} vs {}", v.shape(), t.shape()))),
                None => err = Some(Error::invalid(format!("missing value for {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if it.next().is_some() {
            return Err(Error::invalid("more values than learnable tensors"));
        }
        Ok(())
    }

    /// Total number of learnable scalars.
    fn parameter_count(&self) -> usize
    where
        Self: Clone,
    {
        self.learnables().iter().map(Tensor::numel).sum()
    }
}

pub(crate) fn child(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real> Module<T> for ConvParams<T> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&child(prefix, "weight"), &mut self.weight, Kind::Learnable);
        if let Some(b) = self.bias.as_mut() {
            f(&child(prefix, "bias"), b, Kind::Learnable);
        }
    }
}

impl<T: Real> Module<T> for BatchNormState<T> {
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&child(prefix, "gamma"), &mut self.gamma, Kind::Learnable);
        f(&child(prefix, "beta"), &mut self.beta, Kind::Learnable);
        f(&child(prefix, "running_mean"), &mut self.running_mean, Kind::Buffer);
        f(&child(prefix, "running_var"), &mut self.running_var, Kind::Buffer);
    }
}

/// Fan-in scaled normal draw (Kaiming, ReLU gain) for a weight of `shape`.
pub fn kaiming<T: Real, R: Rng>(shape: Shape, rng: &mut R) -> Tensor<T> {
    let fan_in = (shape.c * shape.h * shape.w).max(1);
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let data = (0..shape.numel()).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::from_parts(shape, data)
}

/// Builder for convolution parameters with Kaiming weights and zero bias.
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Shape-preserving `k × k` convolution.
    pub fn same(cin: usize, cout: usize, k: usize) -> Self {
        ConvSpec { cin, cout, k, stride: 1, padding: k / 2, dilation: 1, bias: false }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilated(mut self, d: usize) -> Self {
        self.dilation = d;
        self.padding = d * (self.k / 2);
        self
    }

    fn bias_tensor<T: Real>(&self) -> Option<Tensor<T>> {
        self.bias.then(|| Tensor::zeros(Shape::new(1, self.cout, 1, 1)))
    }

    pub fn init<T: Real, R: Rng>(&self, rng: &mut R) -> ConvParams<T> {
        let w = kaiming(Shape::new(self.cout, self.cin, self.k, self.k), rng);
        ConvParams::new(w, self.bias_tensor(), self.stride, self.padding, self.dilation)
    }

    /// All-zero weights and bias.
    pub fn zeros<T: Real>(&self) -> ConvParams<T> {
        let w = Tensor::zeros(Shape::new(self.cout, self.cin, self.k, self.k));
        ConvParams::new(w, self.bias_tensor(), self.stride, self.padding, self.dilation)
    }
}
