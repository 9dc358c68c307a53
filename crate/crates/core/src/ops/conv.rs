//! Standard, atrous, depthwise and pointwise convolution.
//!
//! Standard convolution lowers each batch item to a column matrix
//! (`im2col`) and multiplies it with the `(out, in·kh·kw)` weight matrix.
//! Columns are rebuilt in the backward pass instead of being kept alive.

use crate::autodiff::record_op;
use crate::error::{Error, Result};
use crate::ops::count_macs;
use crate::tensor::{matmul, Real, Shape, Tensor};

/// Weights and geometry of a 2-D convolution.
#[derive(Clone, Debug)]
pub struct ConvParams<T: Real = f32> {
    /// `(out, in, kh, kw)`.
    pub weight: Tensor<T>,
    /// `(1, out, 1, 1)` when present.
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize, dilation: usize) -> Self {
        ConvParams { weight, bias, stride, padding, dilation }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        Ok((out_dim(h, kh, self.stride, self.padding, self.dilation)?, out_dim(w, kw, self.stride, self.padding, self.dilation)?))
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid("stride and dilation must be at least 1"));
        }
        if let Some(b) = &self.bias {
            if b.shape() != Shape::new(1, self.out_channels(), 1, 1) {
                return Err(Error::shape(format!("bias shape {} for {} output channels", b.shape(), self.out_channels())));
            }
        }
        Ok(())
    }
}

pub(crate) fn out_dim(size: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Result<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = size + 2 * pad;
    if padded < span {
        return Err(Error::shape(format!("non-positive output size: input {size}, kernel {k}, padding {pad}, dilation {dilation}")));
    }
    Ok((padded - span) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    #[inline]
    fn source(&self, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.pad as isize;
        (pos >= 0).then_some(pos as usize)
    }
}

/// Fills `cols` (rows × cols) from one batch item `x` of shape (cin, h, w).
pub(crate) fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * ncols;
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    match g.source(oy, ky).filter(|&y| y < g.h) {
                        None => dst.fill(T::zero()),
                        Some(y) => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match g.source(ox, kx).filter(|&x| x < g.w) {
                                    Some(x) => plane[y * g.w + x],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into an input-shaped buffer.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * ncols;
                for oy in 0..g.oh {
                    let Some(y) = g.source(oy, ky).filter(|&y| y < g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(x) = g.source(ox, kx).filter(|&x| x < g.w) {
                            plane[y * g.w + x] += cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Adds the per-channel bias to an `(n, c, plane)` buffer.
pub(crate) fn add_bias<T: Real>(out: &mut [T], bias: &[T], batch: usize, plane: usize) {
    let c = bias.len();
    for n in 0..batch {
        for (co, &b) in bias.iter().enumerate() {
            let start = (n * c + co) * plane;
            out[start..start + plane].iter_mut().for_each(|v| *v += b);
        }
    }
}

/// Bias gradient: per-channel sum of `g` over batch and pixels.
pub(crate) fn bias_grad<T: Real>(g: &[T], batch: usize, c: usize, plane: usize) -> Vec<T> {
    (0..c)
        .map(|co| {
            let s: f64 = (0..batch).flat_map(|n| g[(n * c + co) * plane..(n * c + co + 1) * plane].iter()).map(|v| v.f64()).sum();
            T::of(s)
        })
        .collect()
}

/// `y(p0) = Σ_k w_k · x(p0·stride + dilation·p_k − pad) + bias`, zero padding.
pub fn conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let xs = x.shape();
    let ws = p.weight.shape();
    if ws.c != xs.c {
        return Err(Error::shape(format!("conv2d: weight expects {} input channels, input has {}", ws.c, xs.c)));
    }
    let (oh, ow) = p.output_size(xs.h, xs.w)?;
    let g = Geometry { cin: xs.c, h: xs.h, w: xs.w, kh: ws.h, kw: ws.w, oh, ow, stride: p.stride, pad: p.padding, dilation: p.dilation };
    let cout = ws.n;
    let out_shape = Shape::new(xs.n, cout, oh, ow);
    count_macs(out_shape.numel() * g.rows());

    let (rows, ncols) = (g.rows(), g.cols());
    let in_stride = xs.c * xs.plane();
    let out_stride = cout * ncols;
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..xs.n {
        im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &g, &mut cols);
        matmul(p.weight.data(), false, &cols, false, &mut out[n * out_stride..(n + 1) * out_stride], cout, rows, ncols, T::zero());
    }
    if let Some(b) = &p.bias {
        add_bias(&mut out, b.data(), xs.n, ncols);
    }

    let (xd, wd) = (x.shared(), p.weight.shared());
    let batch = xs.n;
    let empty = Tensor::scalar(T::zero());
    let inputs = [x, &p.weight, p.bias.as_ref().unwrap_or(&empty)];
    Ok(record_op(out_shape, out, &inputs, move |gy, need| {
        let mut dx = need[0].then(|| vec![T::zero(); batch * in_stride]);
        let mut dw = need[1].then(|| vec![T::zero(); cout * rows]);
        let mut cols = vec![T::zero(); rows * ncols];
        let mut dcols = vec![T::zero(); rows * ncols];
        for n in 0..batch {
            let gy_n = &gy[n * out_stride..(n + 1) * out_stride];
            if let Some(dw) = dw.as_mut() {
                im2col(&xd[n * in_stride..(n + 1) * in_stride], &g, &mut cols);
                matmul(gy_n, false, &cols, true, dw, cout, ncols, rows, T::one());
            }
            if let Some(dx) = dx.as_mut() {
                matmul(&wd, true, gy_n, false, &mut dcols, rows, cout, ncols, T::zero());
                col2im(&dcols, &g, &mut dx[n * in_stride..(n + 1) * in_stride]);
            }
        }
        let db = need[2].then(|| bias_grad(gy, batch, cout, ncols));
        vec![dx, dw, db]
    }))
}

/// Per-channel spatial convolution: output channel `m` reads only input
/// channel `m`. `w` has shape `(c, 1, kh, kw)`.
pub fn depthwise_conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.n != xs.c || ws.c != 1 {
        return Err(Error::shape(format!("depthwise_conv2d: weight {ws} for {} channels", xs.c)));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let oh = out_dim(xs.h, ws.h, stride, padding, 1)?;
    let ow = out_dim(xs.w, ws.w, stride, padding, 1)?;
    let g = Geometry { cin: 1, h: xs.h, w: xs.w, kh: ws.h, kw: ws.w, oh, ow, stride, pad: padding, dilation: 1 };
    let out_shape = Shape::new(xs.n, xs.c, oh, ow);
    count_macs(out_shape.numel() * ws.h * ws.w);

    let taps = ws.h * ws.w;
    let (plane, oplane) = (xs.plane(), oh * ow);
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut cols = vec![T::zero(); taps * oplane];
    for n in 0..xs.n {
        for m in 0..xs.c {
            let src = &x.data()[(n * xs.c + m) * plane..(n * xs.c + m + 1) * plane];
            im2col(src, &g, &mut cols);
            let dst = &mut out[(n * xs.c + m) * oplane..(n * xs.c + m + 1) * oplane];
            matmul(&w.data()[m * taps..(m + 1) * taps], false, &cols, false, dst, 1, taps, oplane, T::zero());
        }
    }

    let (xd, wd) = (x.shared(), w.shared());
    Ok(record_op(out_shape, out, &[x, w], move |gy, need| {
        let mut dx = need[0].then(|| vec![T::zero(); xs.numel()]);
        let mut dw = need[1].then(|| vec![T::zero(); ws.numel()]);
        let mut cols = vec![T::zero(); taps * oplane];
        for n in 0..xs.n {
            for m in 0..xs.c {
                let gy_nm = &gy[(n * xs.c + m) * oplane..(n * xs.c + m + 1) * oplane];
                if let Some(dw) = dw.as_mut() {
                    let src = &xd[(n * xs.c + m) * plane..(n * xs.c + m + 1) * plane];
                    im2col(src, &g, &mut cols);
                    matmul(gy_nm, false, &cols, true, &mut dw[m * taps..(m + 1) * taps], 1, oplane, taps, T::one());
                }
                if let Some(dx) = dx.as_mut() {
                    matmul(&wd[m * taps..(m + 1) * taps], true, gy_nm, false, &mut cols, taps, 1, oplane, T::zero());
                    col2im(&cols, &g, &mut dx[(n * xs.c + m) * plane..(n * xs.c + m + 1) * plane]);
                }
            }
        }
        vec![dx, dw]
    }))
}

/// 1×1 convolution: a per-pixel linear map across channels.
/// `w` has shape `(out, in, 1, 1)`, bias `(1, out, 1, 1)`.
pub fn pointwise_conv<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.c != xs.c || ws.h != 1 || ws.w != 1 {
        return Err(Error::shape(format!("pointwise_conv: weight {ws} for {} channels", xs.c)));
    }
    if let Some(b) = bias {
        if b.shape() != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::shape(format!("pointwise_conv: bias {}", b.shape())));
        }
    }
    let (cin, cout, plane) = (xs.c, ws.n, xs.plane());
    let out_shape = Shape::new(xs.n, cout, xs.h, xs.w);
    count_macs(out_shape.numel() * cin);
    let mut out = vec![T::zero(); out_shape.numel()];
    for n in 0..xs.n {
        let src = &x.data()[n * cin * plane..(n + 1) * cin * plane];
        matmul(w.data(), false, src, false, &mut out[n * cout * plane..(n + 1) * cout * plane], cout, cin, plane, T::zero());
    }
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), xs.n, plane);
    }
    let (xd, wd) = (x.shared(), w.shared());
    let empty = Tensor::scalar(T::zero());
    let inputs = [x, w, bias.unwrap_or(&empty)];
    Ok(record_op(out_shape, out, &inputs, move |gy, need| {
        let mut dx = need[0].then(|| vec![T::zero(); xs.numel()]);
        let mut dw = need[1].then(|| vec![T::zero(); ws.numel()]);
        for n in 0..xs.n {
            let gy_n = &gy[n * cout * plane..(n + 1) * cout * plane];
            if let Some(dw) = dw.as_mut() {
                matmul(gy_n, false, &xd[n * cin * plane..(n + 1) * cin * plane], true, dw, cout, plane, cin, T::one());
            }
            if let Some(dx) = dx.as_mut() {
                matmul(&wd, true, gy_n, false, &mut dx[n * cin * plane..(n + 1) * cin * plane], cin, cout, plane, T::zero());
            }
        }
        let db = need[2].then(|| bias_grad(gy, xs.n, cout, plane));
        vec![dx, dw, db]
    }))
}

/// Resolution-halving 3×3 stride-2 convolution with padding 1; adjacent
/// windows overlap by one pixel. Output is `ceil(h/2) × ceil(w/2)`.
pub fn overlap_downsample<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    if p.kernel() != (3, 3) || p.stride != 2 || p.padding != 1 || p.dilation != 1 {
        return Err(Error::invalid("overlap_downsample needs a 3×3 kernel, stride 2, padding 1"));
    }
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::shape(format!("overlap_downsample: input {s} smaller than 2×2")));
    }
    conv2d(x, p)
}
