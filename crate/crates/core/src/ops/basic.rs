use crate::autodiff::record_op;
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(record_op(a.shape(), data, &[a, b], |g, need| vec![need[0].then(|| g.to_vec()), need[1].then(|| g.to_vec())]))
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Ok(record_op(a.shape(), data, &[a, b], |g, need| vec![need[0].then(|| g.to_vec()), need[1].then(|| g.iter().map(|&v| -v).collect())]))
}

/// Elementwise product.
pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let (ad, bd) = (a.shared(), b.shared());
    Ok(record_op(a.shape(), data, &[a, b], move |g, need| {
        vec![
            need[0].then(|| g.iter().zip(bd.iter()).map(|(&g, &y)| g * y).collect()),
            need[1].then(|| g.iter().zip(ad.iter()).map(|(&g, &x)| g * x).collect()),
        ]
    }))
}

pub fn scale<T: Real>(a: &Tensor<T>, s: f64) -> Tensor<T> {
    let s = T::of(s);
    let data = a.data().iter().map(|&x| x * s).collect();
    record_op(a.shape(), data, &[a], move |g, _| vec![Some(g.iter().map(|&v| v * s).collect())])
}

/// Sum of all elements as a `(1,1,1,1)` tensor, accumulated in f64.
pub fn sum<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let total: f64 = a.data().iter().map(|v| v.f64()).sum();
    let n = a.numel();
    record_op(Shape::SCALAR, vec![T::of(total)], &[a], move |g, _| vec![Some(vec![g[0]; n])])
}

pub fn mean<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    scale(&sum(a), 1.0 / a.numel() as f64)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    let xd = x.shared();
    record_op(x.shape(), data, &[x], move |g, _| {
        vec![Some(g.iter().zip(xd.iter()).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect())]
    })
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|&v| logistic(v)).collect();
    let saved = out.clone();
    record_op(x.shape(), out, &[x], move |g, _| vec![Some(g.iter().zip(saved.iter()).map(|(&g, &s)| g * s * (T::one() - s)).collect())])
}

fn logistic<T: Real>(v: T) -> T {
    // Branching keeps exp() from overflowing for large |v|.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Softmax across channels independently at every pixel.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let xd = x.data();
    let mut out = vec![T::zero(); s.numel()];
    let mut buf = vec![0.0f64; s.c];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for c in 0..s.c {
                buf[c] = xd[base + c * plane + p].f64();
                max = max.max(buf[c]);
            }
            let mut z = 0.0;
            for v in buf.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for c in 0..s.c {
                out[base + c * plane + p] = T::of(buf[c] / z);
            }
        }
    }
    let saved = out.clone();
    record_op(s, out, &[x], move |g, _| {
        let mut dx = vec![T::zero(); g.len()];
        for n in 0..s.n {
            let base = n * s.c * plane;
            for p in 0..plane {
                let dot: f64 = (0..s.c)
                    .map(|c| {
                        let i = base + c * plane + p;
                        g[i].f64() * saved[i].f64()
                    })
                    .sum();
                for c in 0..s.c {
                    let i = base + c * plane + p;
                    dx[i] = T::of(saved[i].f64() * (g[i].f64() - dot));
                }
            }
        }
        vec![Some(dx)]
    })
}

/// Stacks tensors along the channel axis in argument order.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?.shape();
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(format!("concat_channels: {} vs {}", first, s)));
        }
    }
    let channels: Vec<usize> = parts.iter().map(|p| p.shape().c).collect();
    let total: usize = channels.iter().sum();
    let out_shape = Shape::new(first.n, total, first.h, first.w);
    let plane = first.plane();
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for (p, &c) in parts.iter().zip(&channels) {
            out.extend_from_slice(&p.data()[n * c * plane..(n + 1) * c * plane]);
        }
    }
    Ok(record_op(out_shape, out, parts, move |g, need| {
        let mut offset = 0;
        channels
            .iter()
            .zip(need)
            .map(|(&c, &needed)| {
                let start = offset;
                offset += c;
                needed.then(|| {
                    let mut d = Vec::with_capacity(first.n * c * plane);
                    for n in 0..first.n {
                        let row = (n * total + start) * plane;
                        d.extend_from_slice(&g[row..row + c * plane]);
                    }
                    d
                })
            })
            .collect()
    }))
}

/// Channels `start..start + len` of `x`.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if len == 0 || start + len > s.c {
        return Err(Error::shape(format!("slice {start}..{} of {} channels", start + len, s.c)));
    }
    let plane = s.plane();
    let out_shape = Shape::new(s.n, len, s.h, s.w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        let row = (n * s.c + start) * plane;
        out.extend_from_slice(&x.data()[row..row + len * plane]);
    }
    Ok(record_op(out_shape, out, &[x], move |g, _| {
        let mut d = vec![T::zero(); s.numel()];
        for n in 0..s.n {
            let row = (n * s.c + start) * plane;
            d[row..row + len * plane].copy_from_slice(&g[n * len * plane..(n + 1) * len * plane]);
        }
        vec![Some(d)]
    }))
}

/// `(n, c, h, w)` → `(n, h·w, c, 1)`: every pixel becomes a row of channel
/// values.
pub fn flatten_transpose<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.h * s.w, s.c, 1);
    let out = transpose_planes(x.data(), s.n, s.c, s.plane());
    record_op(out_shape, out, &[x], move |g, _| vec![Some(transpose_planes(g, s.n, s.plane(), s.c))])
}

/// Inverse of [`flatten_transpose`] for an image of `h × w` pixels.
pub fn unflatten_transpose<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.w != 1 || s.c != h * w {
        return Err(Error::shape(format!("cannot unflatten {s} into {h}×{w} pixels")));
    }
    let channels = s.h;
    let out_shape = Shape::new(s.n, channels, h, w);
    let out = transpose_planes(x.data(), s.n, h * w, channels);
    Ok(record_op(out_shape, out, &[x], move |g, _| vec![Some(transpose_planes(g, s.n, channels, h * w))]))
}

/// Per batch item, transposes a `rows × cols` matrix.
fn transpose_planes<T: Real>(data: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for n in 0..batch {
        let base = n * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = data[base + r * cols + c];
            }
        }
    }
    out
}

/// Same values viewed under another shape of equal size.
pub fn reshape<T: Real>(x: &Tensor<T>, shape: Shape) -> Result<Tensor<T>> {
    if shape.numel() != x.numel() || shape.dims().contains(&0) {
        return Err(Error::shape(format!("cannot reshape {} into {shape}", x.shape())));
    }
    Ok(record_op(shape, x.to_vec(), &[x], |g, _| vec![Some(g.to_vec())]))
}
