//! Seeded synthetic segmentation data: irregular low-contrast blobs on a
//! noisy background.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub channels: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Foreground minus background intensity.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Amplitude `a` of the radius perturbation `r0·(1 + a·sin(kθ + φ))`.
    pub irregularity: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 250,
            size: 64,
            channels: 3,
            blobs_min: 1,
            blobs_max: 3,
            radius_min: 7.0,
            radius_max: 14.0,
            contrast: 0.15,
            noise_sigma: 0.05,
            irregularity: 0.25,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return Err(Error::invalid(format!("synthetic image size {} must be a positive multiple of 32", self.size)));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::invalid("contrast must lie in (0, 1]"));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::invalid("synthetic images have 1 or 3 channels"));
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return Err(Error::invalid("blob count range must satisfy 1 <= min <= max"));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) || 2.0 * self.radius_max >= self.size as f64 {
            return Err(Error::invalid("blob radii must satisfy 0 < min <= max < size / 2"));
        }
        if !(0.0..1.0).contains(&self.irregularity) || self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("irregularity must lie in [0, 1) and noise sigma must be non-negative"));
        }
        Ok(())
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    r0: f64,
    amp: f64,
    lobes: f64,
    phase: f64,
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let theta = dy.atan2(dx);
        dy.hypot(dx) <= self.r0 * (1.0 + self.amp * (self.lobes * theta + self.phase).sin())
    }
}

/// Sample `index`, drawn from its own generator seeded with `seed ^ index`.
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    let size = cfg.size;
    let count = rng.random_range(cfg.blobs_min..=cfg.blobs_max);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let r0 = rng.random_range(cfg.radius_min..=cfg.radius_max);
            let margin = r0 * (1.0 + cfg.irregularity);
            let span = (size as f64 - 2.0 * margin).max(0.0);
            Blob {
                cy: margin.min(size as f64 / 2.0) + rng.random::<f64>() * span,
                cx: margin.min(size as f64 / 2.0) + rng.random::<f64>() * span,
                r0,
                amp: rng.random::<f64>() * cfg.irregularity,
                lobes: rng.random_range(2..=5) as f64,
                phase: rng.random::<f64>() * TAU,
            }
        })
        .collect();
    let labels: Vec<u8> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            blobs.iter().any(|b| b.contains(y, x)) as u8
        })
        .collect();
    let backgrounds: Vec<f64> = (0..cfg.channels).map(|_| rng.random_range(0.3..0.7) * (1.0 - cfg.contrast)).collect();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = Vec::with_capacity(cfg.channels * size * size);
    for bg in &backgrounds {
        for &l in &labels {
            let mut v = bg + cfg.contrast * l as f64;
            if cfg.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Sample {
        image: Tensor::new(Shape::new(1, cfg.channels, size, size), data).expect("synthetic shape"),
        label: Mask::new(1, size, size, labels).expect("synthetic shape"),
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok((0..cfg.count).map(|i| synth_sample(cfg, i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_full_contrast_is_the_mask() {
        let cfg = SynthConfig { count: 3, noise_sigma: 0.0, contrast: 1.0, ..SynthConfig::default() };
        for s in synth_generate(&cfg).unwrap() {
            let plane = s.label.plane();
            for c in 0..3 {
                let img = &s.image.data()[c * plane..(c + 1) * plane];
                assert!(img.iter().zip(&s.label.data).all(|(&v, &l)| v == l as f32));
            }
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig { count: 4, ..SynthConfig::default() };
        let (a, b) = (synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.bits(), y.image.bits());
            assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn validation() {
        assert!(SynthConfig { size: 48, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig { contrast: 0.0, ..SynthConfig::default() }.validate().is_err());
        assert!(SynthConfig::default().validate().is_ok());
    }
}
