//! Loop-nest reference implementations shared by the integration tests.
//! Everything here works in f64 on plain arrays and never calls library ops.
#![allow(dead_code)]

use mgfi::mask::Mask;
use mgfi::metrics::ConfusionCounts;
use mgfi::ops::ConvParams;
use mgfi::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let data: Vec<f64> = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

pub fn random_mask(n: usize, h: usize, w: usize, classes: u8, rng: &mut ChaCha8Rng) -> Mask {
    Mask::new(n, h, w, (0..n * h * w).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

/// Dense f64 array with the same `(n, c, h, w)` layout as a tensor.
#[derive(Clone, Debug)]
pub struct Arr {
    pub s: Shape,
    pub d: Vec<f64>,
}

impl Arr {
    pub fn zeros(s: Shape) -> Self {
        Arr { s, d: vec![0.0; s.numel()] }
    }

    pub fn of<T: mgfi::Real>(t: &Tensor<T>) -> Self {
        Arr { s: t.shape(), d: t.to_f64() }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[((n * self.s.c + c) * self.s.h + y) * self.s.w + x]
    }

    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = ((n * self.s.c + c) * self.s.h + y) * self.s.w + x;
        &mut self.d[i]
    }

    /// Zero outside the image.
    pub fn padded(&self, n: usize, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y >= self.s.h as isize || x >= self.s.w as isize {
            0.0
        } else {
            self.at(n, c, y as usize, x as usize)
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Arr {
        Arr { s: self.s, d: self.d.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, o: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
        assert_eq!(self.s, o.s);
        Arr { s: self.s, d: self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn max_abs_diff<T: mgfi::Real>(&self, t: &Tensor<T>) -> f64 {
        assert_eq!(self.s, t.shape(), "shape mismatch");
        self.d.iter().zip(t.to_f64()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Direct seven-deep loop over output sites and kernel taps.
pub fn conv(x: &Arr, w: &Arr, bias: Option<&Arr>, stride: usize, pad: usize, dil: usize) -> Arr {
    let (cout, cin, kh, kw) = (w.s.n, w.s.c, w.s.h, w.s.w);
    assert_eq!(cin, x.s.c);
    let oh = (x.s.h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (x.s.w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = Arr::zeros(Shape::new(x.s.n, cout, oh, ow));
    for n in 0..x.s.n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.d[o]);
                    for i in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky * dil) as isize - pad as isize;
                                let xx = (ox * stride + kx * dil) as isize - pad as isize;
                                acc += w.at(o, i, ky, kx) * x.padded(n, i, y, xx);
                            }
                        }
                    }
                    *out.at_mut(n, o, oy, ox) = acc;
                }
            }
        }
    }
    out
}

pub fn conv_params(x: &Arr, p: &ConvParams<f32>) -> Arr {
    let b = p.bias.as_ref().map(Arr::of);
    conv(x, &Arr::of(&p.weight), b.as_ref(), p.stride, p.padding, p.dilation)
}

/// Channel `m` of the output reads only channel `m` of the input.
pub fn depthwise(x: &Arr, w: &Arr, stride: usize, pad: usize) -> Arr {
    let (kh, kw) = (w.s.h, w.s.w);
    let oh = (x.s.h + 2 * pad - kh) / stride + 1;
    let ow = (x.s.w + 2 * pad - kw) / stride + 1;
    let mut out = Arr::zeros(Shape::new(x.s.n, x.s.c, oh, ow));
    for n in 0..x.s.n {
        for m in 0..x.s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            acc += w.at(m, 0, ky, kx) * x.padded(n, m, y, xx);
                        }
                    }
                    *out.at_mut(n, m, oy, ox) = acc;
                }
            }
        }
    }
    out
}

/// Four-neighbour interpolation with zero-valued pixels outside the image.
pub fn bilinear(x: &Arr, n: usize, c: usize, py: f64, px: f64) -> f64 {
    let (y0, x0) = (py.floor(), px.floor());
    let (fy, fx) = (py - y0, px - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    x.padded(n, c, y0, x0) * (1.0 - fy) * (1.0 - fx)
        + x.padded(n, c, y0, x0 + 1) * (1.0 - fy) * fx
        + x.padded(n, c, y0 + 1, x0) * fy * (1.0 - fx)
        + x.padded(n, c, y0 + 1, x0 + 1) * fy * fx
}

/// `y(p0) = Σ_k w_k · x(p0 + p_k + Δp_k)` with channel `2k` holding Δx
/// and `2k + 1` holding Δy.
pub fn deform(x: &Arr, w: &Arr, bias: Option<&Arr>, offsets: &Arr, stride: usize, pad: usize) -> Arr {
    let (cout, cin, kh, kw) = (w.s.n, w.s.c, w.s.h, w.s.w);
    let (oh, ow) = (offsets.s.h, offsets.s.w);
    let mut out = Arr::zeros(Shape::new(x.s.n, cout, oh, ow));
    for n in 0..x.s.n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.d[o]);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let k = ky * kw + kx;
                            let dx = offsets.at(n, 2 * k, oy, ox);
                            let dy = offsets.at(n, 2 * k + 1, oy, ox);
                            let py = (oy * stride + ky) as f64 - pad as f64 + dy;
                            let px = (ox * stride + kx) as f64 - pad as f64 + dx;
                            for i in 0..cin {
                                acc += w.at(o, i, ky, kx) * bilinear(x, n, i, py, px);
                            }
                        }
                    }
                    *out.at_mut(n, o, oy, ox) = acc;
                }
            }
        }
    }
    out
}

/// Training-mode batch normalization with batch statistics.
pub fn batchnorm_train(x: &Arr, gamma: &[f64], beta: &[f64], eps: f64) -> Arr {
    let s = x.s;
    let count = (s.n * s.h * s.w) as f64;
    let mut out = Arr::zeros(s);
    for c in 0..s.c {
        let vals: Vec<f64> =
            (0..s.n).flat_map(|n| (0..s.h).flat_map(move |y| (0..s.w).map(move |xx| (n, y, xx)))).map(|(n, y, xx)| x.at(n, c, y, xx)).collect();
        let mean = vals.iter().sum::<f64>() / count;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        for n in 0..s.n {
            for y in 0..s.h {
                for xx in 0..s.w {
                    *out.at_mut(n, c, y, xx) = gamma[c] * (x.at(n, c, y, xx) - mean) / (var + eps).sqrt() + beta[c];
                }
            }
        }
    }
    out
}

pub fn concat(parts: &[&Arr]) -> Arr {
    let s0 = parts[0].s;
    let c: usize = parts.iter().map(|p| p.s.c).sum();
    let mut out = Arr::zeros(Shape::new(s0.n, c, s0.h, s0.w));
    for n in 0..s0.n {
        let mut base = 0;
        for p in parts {
            for ch in 0..p.s.c {
                for y in 0..s0.h {
                    for x in 0..s0.w {
                        *out.at_mut(n, base + ch, y, x) = p.at(n, ch, y, x);
                    }
                }
            }
            base += p.s.c;
        }
    }
    out
}

/// Pixel-by-pixel tally of one class.
pub fn tally(pred: &Mask, gt: &Mask, class: u8) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p == class, g == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Pixels reachable from the image border without crossing `wall`,
/// moving in the four axis directions.
pub fn flood_from_border(wall: &[u8], h: usize, w: usize) -> Vec<bool> {
    let mut seen = vec![false; h * w];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y == h - 1 || x == w - 1) && wall[y * w + x] == 0 {
                seen[y * w + x] = true;
                stack.push((y, x));
            }
        }
    }
    while let Some((y, x)) = stack.pop() {
        let near = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
        for (ny, nx) in near {
            if ny < h && nx < w && !seen[ny * w + nx] && wall[ny * w + nx] == 0 {
                seen[ny * w + nx] = true;
                stack.push((ny, nx));
            }
        }
    }
    seen
}

/// `h × w` image that is 0 left of column `w / 2` and 1 from there on.
pub fn step_image(h: usize, w: usize) -> Tensor<f64> {
    let d: Vec<f64> = (0..h * w).map(|i| if i % w >= w / 2 { 1.0 } else { 0.0 }).collect();
    Tensor::from_f64(Shape::new(1, 1, h, w), &d).unwrap()
}

/// Label mask of a filled square `[lo, hi) × [lo, hi)` inside `size × size`.
pub fn square_labels(size: usize, lo: usize, hi: usize) -> Mask {
    let inside = |v: usize| (lo..hi).contains(&v);
    Mask::new(1, size, size, (0..size * size).map(|i| u8::from(inside(i / size) && inside(i % size))).collect()).unwrap()
}

/// Every row holds exactly one edge pixel, all in the same column, and that
/// column is within one of the step between `w / 2 - 1` and `w / 2`.
pub fn is_single_step_line(edges: &Mask) -> bool {
    let (h, w) = (edges.h, edges.w);
    let cols: Vec<Vec<usize>> = (0..h).map(|y| (0..w).filter(|&x| edges.data[y * w + x] != 0).collect()).collect();
    let first = match cols[0].as_slice() {
        [c] => *c,
        _ => return false,
    };
    let near = first + 2 >= w / 2 && first <= w / 2 + 1;
    near && cols.iter().all(|c| c.as_slice() == [first])
}

/// The outline seals the square: a 4-connected flood from the border never
/// reaches a pixel strictly inside it.
pub fn outline_is_closed(edges: &Mask, lo: usize, hi: usize) -> bool {
    let reached = flood_from_border(&edges.data, edges.h, edges.w);
    let w = edges.w;
    (lo + 1..hi - 1).all(|y| (lo + 1..hi - 1).all(|x| !reached[y * w + x]))
}
