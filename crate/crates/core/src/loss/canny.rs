use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BoundaryMask, LabelMask, Mask};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CannyConfig {
    /// Standard deviation of the 5×5 Gaussian.
    pub sigma: f64,
    /// Hysteresis thresholds as fractions of the largest gradient magnitude.
    pub low: f64,
    pub high: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        CannyConfig { sigma: 1.0, low: 0.1, high: 0.2 }
    }
}

impl CannyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::invalid("canny sigma must be positive"));
        }
        if !(0.0 < self.low && self.low < self.high && self.high <= 1.0) {
            return Err(Error::invalid(format!("canny thresholds need 0 < low < high <= 1, got {} / {}", self.low, self.high)));
        }
        Ok(())
    }
}

const RADIUS: isize = 2;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let k: Vec<f64> = (-RADIUS..=RADIUS).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Reads with replicated borders.
fn at(img: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    let y = y.clamp(0, h as isize - 1) as usize;
    let x = x.clamp(0, w as isize - 1) as usize;
    img[y * w + x]
}

fn smooth(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-RADIUS..=RADIUS).map(|d| k[(d + RADIUS) as usize] * at(img, h, w, y as isize, x as isize + d)).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-RADIUS..=RADIUS).map(|d| k[(d + RADIUS) as usize] * at(&rows, h, w, y as isize + d, x as isize)).sum();
        }
    }
    out
}

/// Edge pixels of one `h × w` plane as `{0, 1}`.
pub fn canny_plane(img: &[f64], h: usize, w: usize, cfg: &CannyConfig) -> Vec<u8> {
    let g = smooth(img, h, w, cfg.sigma);
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dy: isize, dx: isize| at(&g, h, w, y + dy, x + dx);
            let gx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let gy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[i] = match angle {
                a if !(22.5..157.5).contains(&a) => 0,
                a if a < 67.5 => 1,
                a if a < 112.5 => 2,
                _ => 3,
            };
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0; h * w];
    }

    // Non-maximum suppression along the quantized gradient direction. A
    // pixel must be ≥ its forward neighbour and > its backward one, so a
    // symmetric ridge two pixels wide keeps exactly one of them.
    let mut thin = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (dy, dx) = [(0, 1), (1, 1), (1, 0), (1, -1)][dir[i] as usize];
            let m = |yy: isize, xx: isize| {
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    0.0
                } else {
                    mag[yy as usize * w + xx as usize]
                }
            };
            if mag[i] >= m(y + dy, x + dx) && mag[i] > m(y - dy, x - dx) {
                thin[i] = mag[i];
            }
        }
    }

    let (low, high) = (cfg.low * max, cfg.high * max);
    let mut out = vec![0u8; h * w];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= high {
            out[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (yy, xx) = (y + dy, x + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let j = yy as usize * w + xx as usize;
                if out[j] == 0 && thin[j] >= low {
                    out[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }
    out
}

/// Binary edge map of each single-channel image in the batch.
pub fn canny<T: Real>(img: &Tensor<T>, cfg: &CannyConfig) -> Result<BoundaryMask> {
    cfg.validate()?;
    let s = img.shape();
    if s.c != 1 {
        return Err(Error::shape(format!("canny needs a single-channel image, got {s}")));
    }
    let mut data = Vec::with_capacity(s.numel());
    for plane in img.data().chunks(s.plane()) {
        let v: Vec<f64> = plane.iter().map(|p| p.f64()).collect();
        data.extend(canny_plane(&v, s.h, s.w, cfg));
    }
    Mask::new(s.n, s.h, s.w, data)
}

/// Boundary ground truth: Canny on the foreground mask scaled to `{0, 255}`.
pub fn label_boundary(labels: &LabelMask, cfg: &CannyConfig) -> Result<BoundaryMask> {
    cfg.validate()?;
    let mut data = Vec::with_capacity(labels.data.len());
    for i in 0..labels.n {
        let v: Vec<f64> = labels.image(i).iter().map(|&l| if l > 0 { 255.0 } else { 0.0 }).collect();
        data.extend(canny_plane(&v, labels.h, labels.w, cfg));
    }
    Mask::new(labels.n, labels.h, labels.w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn gaussian_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.0);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[4]);
        assert_eq!(k[1], k[3]);
    }

    #[test]
    fn constant_image_has_no_edges() {
        let m = canny(&Tensor::<f32>::full(Shape::new(2, 1, 9, 7), 0.3), &CannyConfig::default()).unwrap();
        assert!(m.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn rejects_bad_thresholds() {
        let cfg = CannyConfig { low: 0.3, high: 0.2, ..CannyConfig::default() };
        assert!(canny(&Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4)), &cfg).is_err());
        assert!(canny(&Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4)), &CannyConfig::default()).is_err());
    }
}
