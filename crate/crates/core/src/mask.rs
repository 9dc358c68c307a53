//! Integer per-pixel masks: class labels and binary boundaries.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// `(n, 1, h, w)` map of small integers, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

/// Class ids in `[0, C)`.
pub type LabelMask = Mask;
/// Binary `{0, 1}` boundary pixels.
pub type BoundaryMask = Mask;

impl Mask {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("mask dimensions must be positive, got ({n}, 1, {h}, {w})")));
        }
        if data.len() != n * h * w {
            return Err(Error::shape(format!("mask ({n}, 1, {h}, {w}) needs {} values, got {}", n * h * w, data.len())));
        }
        Ok(Mask { n, h, w, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        Mask { n, h, w, data: vec![0; n * h * w] }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.n, 1, self.h, self.w)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Pixels of image `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        &self.data[i * self.plane()..(i + 1) * self.plane()]
    }

    pub fn image_mask(&self, i: usize) -> Mask {
        Mask { n: 1, h: self.h, w: self.w, data: self.image(i).to_vec() }
    }

    /// Stacks single images of equal size into one batch.
    pub fn stack(parts: &[&Mask]) -> Result<Mask> {
        let first = parts.first().ok_or_else(|| Error::shape("cannot stack zero masks"))?;
        let mut data = Vec::new();
        for m in parts {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::shape(format!("mask {}×{} vs {}×{}", m.h, m.w, first.h, first.w)));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(Mask { n: data.len() / first.plane(), h: first.h, w: first.w, data })
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize >= classes) {
            Some(i) => Err(Error::invalid(format!("label {} at pixel {i} is not below class count {classes}", self.data[i]))),
            None => Ok(()),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(self.shape(), self.data.iter().map(|&v| T::of(v as f64)).collect()).expect("mask shape")
    }

    /// `(n, C, h, w)` one-hot encoding.
    pub fn one_hot<T: Real>(&self, classes: usize) -> Result<Tensor<T>> {
        self.check_classes(classes)?;
        let plane = self.plane();
        let mut out = vec![T::zero(); self.n * classes * plane];
        for (i, &v) in self.data.iter().enumerate() {
            let (n, p) = (i / plane, i % plane);
            out[(n * classes + v as usize) * plane + p] = T::one();
        }
        Tensor::new(Shape::new(self.n, classes, self.h, self.w), out)
    }

    /// Per-pixel argmax over channels; ties go to the lower class.
    pub fn argmax<T: Real>(scores: &Tensor<T>) -> Mask {
        let s = scores.shape();
        let d = scores.data();
        let mut out = Vec::with_capacity(s.n * s.plane());
        for n in 0..s.n {
            for p in 0..s.plane() {
                let mut best = 0;
                for c in 1..s.c {
                    if d[(n * s.c + c) * s.plane() + p] > d[(n * s.c + best) * s.plane() + p] {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
        Mask { n: s.n, h: s.h, w: s.w, data: out }
    }
}
