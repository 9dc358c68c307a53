//! Deformable convolution with bilinear sampling.
//!
//! Offset layout: for a `kh × kw` kernel with `K = kh·kw` taps in
//! row-major order, offset channel `2k` holds the horizontal shift Δx and
//! channel `2k + 1` the vertical shift Δy of tap `k`, in pixels. Samples
//! that fall outside the image read zero-valued phantom pixels.

use crate::autodiff::record_op;
use crate::error::{Error, Result};
use crate::ops::conv::{add_bias, bias_grad, ConvParams};
use crate::ops::count_macs;
use crate::tensor::{matmul, Real, Shape, Tensor};

/// Four-neighbour interpolation stencil for one fractional position.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    y0: isize,
    x0: isize,
    ly: f64,
    lx: f64,
}

impl Stencil {
    fn at(py: f64, px: f64) -> Self {
        let (fy, fx) = (py.floor(), px.floor());
        Stencil { y0: fy as isize, x0: fx as isize, ly: py - fy, lx: px - fx }
    }

    /// Corner offsets with their interpolation weights.
    fn corners(&self) -> [(isize, isize, f64); 4] {
        let (ly, lx) = (self.ly, self.lx);
        [(0, 0, (1.0 - ly) * (1.0 - lx)), (0, 1, (1.0 - ly) * lx), (1, 0, ly * (1.0 - lx)), (1, 1, ly * lx)]
    }
}

#[inline]
fn pixel<T: Real>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize].f64()
    }
}

/// Value of one `h × w` plane at a fractional position, plus its partial
/// derivatives with respect to `py` and `px`.
fn sample_plane<T: Real>(plane: &[T], h: usize, w: usize, py: f64, px: f64) -> (f64, f64, f64) {
    let s = Stencil::at(py, px);
    let v00 = pixel(plane, h, w, s.y0, s.x0);
    let v01 = pixel(plane, h, w, s.y0, s.x0 + 1);
    let v10 = pixel(plane, h, w, s.y0 + 1, s.x0);
    let v11 = pixel(plane, h, w, s.y0 + 1, s.x0 + 1);
    let value = (1.0 - s.ly) * ((1.0 - s.lx) * v00 + s.lx * v01) + s.ly * ((1.0 - s.lx) * v10 + s.lx * v11);
    let d_py = (1.0 - s.lx) * (v10 - v00) + s.lx * (v11 - v01);
    let d_px = (1.0 - s.ly) * (v01 - v00) + s.ly * (v11 - v10);
    (value, d_py, d_px)
}

/// Bilinear interpolation of `x[n, c]` at row `py`, column `px`.
/// Positions entirely outside `(-1, h) × (-1, w)` read zero.
pub fn bilinear_sample<T: Real>(x: &Tensor<T>, n: usize, c: usize, py: f64, px: f64) -> f64 {
    let s = x.shape();
    let start = (n * s.c + c) * s.plane();
    sample_plane(&x.data()[start..start + s.plane()], s.h, s.w, py, px).0
}

struct DeformGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl DeformGeometry {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Sampling position of tap `k` for output pixel `(oy, ox)`.
    #[inline]
    fn position(&self, off: &[f64], k: usize, oy: usize, ox: usize) -> (f64, f64) {
        let cols = self.cols();
        let p = oy * self.ow + ox;
        let (ky, kx) = (k / self.kw, k % self.kw);
        let dx = off[2 * k * cols + p];
        let dy = off[(2 * k + 1) * cols + p];
        let py = (oy * self.stride + ky) as f64 - self.pad as f64 + dy;
        let px = (ox * self.stride + kx) as f64 - self.pad as f64 + dx;
        (py, px)
    }

    /// Builds the deformed column matrix for one batch item.
    fn columns<T: Real>(&self, x: &[T], off: &[f64], cols: &mut [T]) {
        let (ncols, taps, plane) = (self.cols(), self.taps(), self.h * self.w);
        for k in 0..taps {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let (py, px) = self.position(off, k, oy, ox);
                    let st = Stencil::at(py, px);
                    for ci in 0..self.cin {
                        let src = &x[ci * plane..(ci + 1) * plane];
                        let v: f64 = st.corners().iter().map(|&(dy, dx, wgt)| wgt * pixel(src, self.h, self.w, st.y0 + dy, st.x0 + dx)).sum();
                        cols[(ci * taps + k) * ncols + oy * self.ow + ox] = T::of(v);
                    }
                }
            }
        }
    }
}

/// `y(p0) = Σ_k w_k · x(p0 + p_k + Δp_k) + bias` with bilinear sampling at
/// the shifted positions. Differentiable in `x`, the weights and the
/// offsets.
pub fn deform_conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>, offsets: &Tensor<T>) -> Result<Tensor<T>> {
    p.validate()?;
    if p.dilation != 1 {
        return Err(Error::invalid("deform_conv2d requires dilation 1"));
    }
    let xs = x.shape();
    let ws = p.weight.shape();
    if ws.c != xs.c {
        return Err(Error::shape(format!("deform_conv2d: weight expects {} input channels, input has {}", ws.c, xs.c)));
    }
    let (oh, ow) = p.output_size(xs.h, xs.w)?;
    let taps = ws.h * ws.w;
    let os = offsets.shape();
    if os != Shape::new(xs.n, 2 * taps, oh, ow) {
        return Err(Error::shape(format!("offset field {os} must be ({}, {}, {oh}, {ow}) for a {}×{} kernel", xs.n, 2 * taps, ws.h, ws.w)));
    }
    let g = DeformGeometry { cin: xs.c, h: xs.h, w: xs.w, kh: ws.h, kw: ws.w, oh, ow, stride: p.stride, pad: p.padding };
    let cout = ws.n;
    let out_shape = Shape::new(xs.n, cout, oh, ow);
    let (rows, ncols) = (xs.c * taps, g.cols());
    count_macs(out_shape.numel() * rows);

    let in_stride = xs.c * xs.plane();
    let off_stride = 2 * taps * ncols;
    let out_stride = cout * ncols;
    let off64: Vec<f64> = offsets.to_f64();
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..xs.n {
        g.columns(&x.data()[n * in_stride..(n + 1) * in_stride], &off64[n * off_stride..(n + 1) * off_stride], &mut cols);
        matmul(p.weight.data(), false, &cols, false, &mut out[n * out_stride..(n + 1) * out_stride], cout, rows, ncols, T::zero());
    }
    if let Some(b) = &p.bias {
        add_bias(&mut out, b.data(), xs.n, ncols);
    }

    let (xd, wd) = (x.shared(), p.weight.shared());
    let batch = xs.n;
    let empty = Tensor::scalar(T::zero());
    let inputs = [x, &p.weight, p.bias.as_ref().unwrap_or(&empty), offsets];
    Ok(record_op(out_shape, out, &inputs, move |gy, need| {
        let mut dx = need[0].then(|| vec![T::zero(); batch * in_stride]);
        let mut dw = need[1].then(|| vec![T::zero(); cout * rows]);
        let mut doff = need[3].then(|| vec![T::zero(); batch * off_stride]);
        let mut cols = vec![T::zero(); rows * ncols];
        let mut dcols = vec![T::zero(); rows * ncols];
        let plane = g.h * g.w;
        for n in 0..batch {
            let gy_n = &gy[n * out_stride..(n + 1) * out_stride];
            let x_n = &xd[n * in_stride..(n + 1) * in_stride];
            let off_n = &off64[n * off_stride..(n + 1) * off_stride];
            if let Some(dw) = dw.as_mut() {
                g.columns(x_n, off_n, &mut cols);
                matmul(gy_n, false, &cols, true, dw, cout, ncols, rows, T::one());
            }
            if dx.is_none() && doff.is_none() {
                continue;
            }
            matmul(&wd, true, gy_n, false, &mut dcols, rows, cout, ncols, T::zero());
            for k in 0..taps {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let pix = oy * g.ow + ox;
                        let (py, px) = g.position(off_n, k, oy, ox);
                        let st = Stencil::at(py, px);
                        let (mut gdy, mut gdx) = (0.0f64, 0.0f64);
                        for ci in 0..g.cin {
                            let gc = dcols[(ci * taps + k) * ncols + pix].f64();
                            if gc == 0.0 {
                                continue;
                            }
                            if let Some(dx) = dx.as_mut() {
                                let dst = &mut dx[n * in_stride + ci * plane..n * in_stride + (ci + 1) * plane];
                                for &(cy, cx, wgt) in st.corners().iter() {
                                    let (yy, xx) = (st.y0 + cy, st.x0 + cx);
                                    if yy >= 0 && xx >= 0 && (yy as usize) < g.h && (xx as usize) < g.w {
                                        dst[yy as usize * g.w + xx as usize] += T::of(gc * wgt);
                                    }
                                }
                            }
                            if doff.is_some() {
                                let (_, d_py, d_px) = sample_plane(&x_n[ci * plane..(ci + 1) * plane], g.h, g.w, py, px);
                                gdy += gc * d_py;
                                gdx += gc * d_px;
                            }
                        }
                        if let Some(doff) = doff.as_mut() {
                            doff[n * off_stride + 2 * k * ncols + pix] = T::of(gdx);
                            doff[n * off_stride + (2 * k + 1) * ncols + pix] = T::of(gdy);
                        }
                    }
                }
            }
        }
        let db = need[2].then(|| bias_grad(gy, batch, cout, ncols));
        vec![dx, dw, db, doff]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_positions_read_pixels() {
        let x = Tensor::<f32>::new(Shape::new(1, 1, 2, 3), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        for y in 0..2 {
            for xx in 0..3 {
                assert_eq!(bilinear_sample(&x, 0, 0, y as f64, xx as f64), x.get(0, 0, y, xx) as f64);
            }
        }
    }

    #[test]
    fn patch_center_is_average() {
        let x = Tensor::<f32>::new(Shape::new(1, 1, 2, 2), vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(bilinear_sample(&x, 0, 0, 0.5, 0.5), 2.5);
    }

    #[test]
    fn far_outside_is_zero() {
        let x = Tensor::<f32>::ones(Shape::new(1, 1, 3, 3));
        assert_eq!(bilinear_sample(&x, 0, 0, -5.0, -5.0), 0.0);
        assert_eq!(bilinear_sample(&x, 0, 0, 3.0, 1.0), 0.0);
        // Half a pixel past the border blends with a zero phantom.
        assert_eq!(bilinear_sample(&x, 0, 0, -0.5, 1.0), 0.5);
    }

    #[test]
    fn wrong_offset_channels_rejected() {
        let p = ConvParams::new(Tensor::<f32>::ones(Shape::new(1, 1, 3, 3)), None, 1, 1, 1);
        let x = Tensor::ones(Shape::new(1, 1, 4, 4));
        let off = Tensor::zeros(Shape::new(1, 9, 4, 4));
        assert!(matches!(deform_conv2d(&x, &p, &off), Err(Error::Shape(_))));
        let off = Tensor::zeros(Shape::new(1, 18, 4, 4));
        assert!(deform_conv2d(&x, &p, &off).is_ok());
    }
}
