//! Training-time augmentation: centre crop + resize, 90° rotations,
//! transposition and Gaussian noise, each applied with probability `p`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::mask::Mask;
use crate::ops::resize_plane;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability of each step.
    pub p: f64,
    /// Side of the centre crop relative to the image.
    pub crop_fraction: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { p: 0.5, crop_fraction: 0.875, noise_sigma: 0.02 }
    }
}

/// Applies `f(src, h, w) -> (dst, h', w')` to every plane of the image and
/// to the mask.
fn map_planes(
    s: &Sample,
    img: impl Fn(&[f32], usize, usize) -> (Vec<f32>, usize, usize),
    mask: impl Fn(&[u8], usize, usize) -> (Vec<u8>, usize, usize),
) -> Sample {
    let shape = s.image.shape();
    let mut data = Vec::with_capacity(shape.numel());
    let (mut oh, mut ow) = (shape.h, shape.w);
    for plane in s.image.data().chunks(shape.plane()) {
        let (d, h, w) = img(plane, shape.h, shape.w);
        data.extend(d);
        (oh, ow) = (h, w);
    }
    let (m, mh, mw) = mask(&s.label.data, s.label.h, s.label.w);
    Sample { image: Tensor::new(Shape::new(1, shape.c, oh, ow), data).expect("plane sizes"), label: Mask::new(1, mh, mw, m).expect("plane sizes") }
}

/// Permutes a plane so that `out[y][x] = src[index(y, x)]`.
fn permute<V: Copy>(src: &[V], oh: usize, ow: usize, index: impl Fn(usize, usize) -> usize) -> Vec<V> {
    (0..oh * ow).map(|i| src[index(i / ow, i % ow)]).collect()
}

/// Counter-clockwise rotation by `k · 90°`.
pub fn rotate90(s: &Sample, k: usize) -> Sample {
    let mut out = s.clone();
    for _ in 0..k % 4 {
        let once = |w: usize| move |y: usize, x: usize| x * w + (w - 1 - y);
        out = map_planes(&out, |p, h, w| (permute(p, w, h, once(w)), w, h), |p, h, w| (permute(p, w, h, once(w)), w, h));
    }
    out
}

/// Swaps rows and columns.
pub fn transpose(s: &Sample) -> Sample {
    let idx = |w: usize| move |y: usize, x: usize| x * w + y;
    map_planes(s, |p, h, w| (permute(p, w, h, idx(w)), w, h), |p, h, w| (permute(p, w, h, idx(w)), w, h))
}

fn crop<V: Copy>(src: &[V], w: usize, top: usize, left: usize, ch: usize, cw: usize) -> Vec<V> {
    (0..ch).flat_map(|y| src[(top + y) * w + left..(top + y) * w + left + cw].iter().copied()).collect()
}

/// Centre crop to `fraction` of each side, resized back: bilinear for the
/// image and nearest-neighbour for the mask.
pub fn crop_resize(s: &Sample, fraction: f64) -> Sample {
    map_planes(
        s,
        |p, h, w| {
            let (ch, cw, top, left) = crop_window(h, w, fraction);
            (resize_plane(&crop(p, w, top, left, ch, cw), ch, cw, h, w), h, w)
        },
        |p, h, w| {
            let (ch, cw, top, left) = crop_window(h, w, fraction);
            let c = crop(p, w, top, left, ch, cw);
            let near = |d: usize, src: usize, dst: usize| (((d as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
            (permute(&c, h, w, |y, x| near(y, ch, h) * cw + near(x, cw, w)), h, w)
        },
    )
}

fn crop_window(h: usize, w: usize, fraction: f64) -> (usize, usize, usize, usize) {
    let ch = ((h as f64 * fraction).round() as usize).clamp(1, h);
    let cw = ((w as f64 * fraction).round() as usize).clamp(1, w);
    (ch, cw, (h - ch) / 2, (w - cw) / 2)
}

/// Adds clipped Gaussian noise to the image only.
pub fn add_noise<R: Rng>(s: &Sample, sigma: f64, rng: &mut R) -> Sample {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let data = s.image.data().iter().map(|&v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32).collect();
    Sample { image: Tensor::new(s.image.shape(), data).expect("same shape"), label: s.label.clone() }
}

pub fn augment<R: Rng>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let mut out = s.clone();
    if rng.random_bool(cfg.p) {
        out = crop_resize(&out, cfg.crop_fraction);
    }
    if rng.random_bool(cfg.p) {
        out = rotate90(&out, rng.random_range(1..=3));
    }
    if rng.random_bool(cfg.p) {
        out = transpose(&out);
    }
    if rng.random_bool(cfg.p) && cfg.noise_sigma > 0.0 {
        out = add_noise(&out, cfg.noise_sigma, rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Sample {
        let img: Vec<f32> = (0..2 * 6).map(|v| v as f32 / 12.0).collect();
        Sample { image: Tensor::new(Shape::new(1, 2, 2, 3), img).unwrap(), label: Mask::new(1, 2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap() }
    }

    #[test]
    fn rotate_once() {
        // [[0 1 2] [3 4 5]] counter-clockwise → [[2 5] [1 4] [0 3]]
        let r = rotate90(&sample(), 1);
        assert_eq!((r.label.h, r.label.w), (3, 2));
        assert_eq!(r.label.data, vec![2, 5, 1, 4, 0, 3]);
        assert_eq!(rotate90(&sample(), 4).label, sample().label);
    }

    #[test]
    fn transpose_swaps() {
        let t = transpose(&sample());
        assert_eq!(t.label.data, vec![0, 3, 1, 4, 2, 5]);
        assert_eq!(t.image.shape(), Shape::new(1, 2, 3, 2));
        assert_eq!(transpose(&t).image.data(), sample().image.data());
    }

    #[test]
    fn zero_probability_is_identity() {
        let cfg = AugmentConfig { p: 0.0, ..AugmentConfig::default() };
        let out = augment(&sample(), &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(out.image.bits(), sample().image.bits());
        assert_eq!(out.label, sample().label);
    }

    #[test]
    fn full_crop_is_identity() {
        let out = crop_resize(&sample(), 1.0);
        assert_eq!(out.label, sample().label);
        assert_eq!(out.image.data(), sample().image.data());
    }
}
