use crate::autodiff::record_op;
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// One output coordinate of a separable linear resampling: reads
/// `lo` and `hi` with weights `1 − frac` and `frac`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-centre (align-corners = false) source taps for resizing
/// `input` samples to `output` samples.
fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Resizes one `h × w` plane to `oh × ow` bilinearly (no autodiff).
pub fn resize_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut out = Vec::with_capacity(oh * ow);
    for a in &ty {
        for b in &tx {
            let v = |y: usize, x: usize| src[y * w + x] as f64;
            let top = (1.0 - b.frac) * v(a.lo, b.lo) + b.frac * v(a.lo, b.hi);
            let bot = (1.0 - b.frac) * v(a.hi, b.lo) + b.frac * v(a.hi, b.hi);
            out.push(((1.0 - a.frac) * top + a.frac * bot) as f32);
        }
    }
    out
}

/// Bilinear upsampling by an integer factor, align-corners = false.
pub fn upsample_bilinear<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 2 {
        return Err(Error::invalid(format!("upsample factor {factor} must be at least 2")));
    }
    let s = x.shape();
    let (oh, ow) = (s.h * factor, s.w * factor);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let (ty, tx) = (taps(s.h, oh), taps(s.w, ow));
    let (plane, oplane) = (s.plane(), oh * ow);
    let xd = x.data();
    let mut out = vec![T::zero(); out_shape.numel()];
    for p in 0..s.n * s.c {
        let src = &xd[p * plane..(p + 1) * plane];
        let dst = &mut out[p * oplane..(p + 1) * oplane];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = |y: usize, x: usize| src[y * s.w + x].f64();
                let top = (1.0 - b.frac) * v(a.lo, b.lo) + b.frac * v(a.lo, b.hi);
                let bot = (1.0 - b.frac) * v(a.hi, b.lo) + b.frac * v(a.hi, b.hi);
                dst[oy * ow + ox] = T::of((1.0 - a.frac) * top + a.frac * bot);
            }
        }
    }
    Ok(record_op(out_shape, out, &[x], move |g, _| {
        let mut dx = vec![0.0f64; s.numel()];
        for p in 0..s.n * s.c {
            let gsrc = &g[p * oplane..(p + 1) * oplane];
            let dst = &mut dx[p * plane..(p + 1) * plane];
            for (oy, a) in ty.iter().enumerate() {
                for (ox, b) in tx.iter().enumerate() {
                    let gv = gsrc[oy * ow + ox].f64();
                    dst[a.lo * s.w + b.lo] += gv * (1.0 - a.frac) * (1.0 - b.frac);
                    dst[a.lo * s.w + b.hi] += gv * (1.0 - a.frac) * b.frac;
                    dst[a.hi * s.w + b.lo] += gv * a.frac * (1.0 - b.frac);
                    dst[a.hi * s.w + b.hi] += gv * a.frac * b.frac;
                }
            }
        }
        vec![Some(dx.into_iter().map(T::of).collect())]
    }))
}
