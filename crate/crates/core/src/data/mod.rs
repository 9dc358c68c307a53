//! Samples, synthetic generation, image files, augmentation, splits and
//! checkpoints.

mod augment;
mod checkpoint;
mod pnm;
mod synth;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{add_noise, augment, crop_resize, rotate90, transpose, AugmentConfig};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use pnm::{read_image, read_mask, write_image, write_mask};
pub use synth::{synth_generate, synth_sample, SynthConfig};

use crate::error::{Error, Result};
use crate::loss::{label_boundary, CannyConfig};
use crate::mask::{BoundaryMask, LabelMask, Mask};
use crate::tensor::{Shape, Tensor};

/// One image `(1, c, h, w)` in `[0, 1]` with its label mask.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: LabelMask,
}

impl Sample {
    pub fn boundary(&self, cfg: &CannyConfig) -> Result<BoundaryMask> {
        label_boundary(&self.label, cfg)
    }
}

/// Stacks samples of equal size into an image batch and a label batch.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, LabelMask)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let s = first.image.shape();
    let mut data = Vec::with_capacity(samples.len() * s.numel());
    for smp in samples {
        if smp.image.shape() != s {
            return Err(Error::shape(format!("batch mixes {} and {}", s, smp.image.shape())));
        }
        data.extend_from_slice(smp.image.data());
    }
    let labels: Vec<&Mask> = samples.iter().map(|s| &s.label).collect();
    Ok((Tensor::new(Shape::new(samples.len(), s.c, s.h, s.w), data)?, Mask::stack(&labels)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?} (train, val, test)"))),
        }
    }
}

/// Index sets of a partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then `floor(n/10)` each for validation and test and the
/// rest for training. Each part is returned in ascending index order.
pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tenth = n / 10;
    let mut test = idx.split_off(n - tenth);
    let mut val = idx.split_off(n - 2 * tenth);
    for part in [&mut idx, &mut val, &mut test] {
        part.sort_unstable();
    }
    Split { train: idx, val, test }
}

pub fn split<T: Clone>(items: &[T], seed: u64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let s = split_indices(items.len(), seed);
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect();
    (pick(&s.train), pick(&s.val), pick(&s.test))
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn from_samples(samples: &[Sample], seed: u64) -> Self {
        let (train, val, test) = split(samples, seed);
        Dataset { train, val, test }
    }

    pub fn part(&self, s: SplitName) -> &[Sample] {
        match s {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub split: SplitName,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Label `l` is stored as byte `l · mask_scale`.
    pub mask_scale: u8,
    pub split_seed: u64,
    pub generator: Option<SynthConfig>,
    pub files: Vec<ManifestEntry>,
}

/// Writes `images/NNNN.ppm` (or `.pgm`), `masks/NNNN.pgm` and `manifest.json`.
pub fn write_dataset(dir: &Path, samples: &[Sample], split_seed: u64, generator: Option<&SynthConfig>) -> Result<Manifest> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let max_label = samples.iter().map(|s| s.label.max_label()).max().unwrap_or(0).max(1);
    let mask_scale = 255 / max_label;
    let parts = split_indices(samples.len(), split_seed);
    let mut assignment = vec![SplitName::Train; samples.len()];
    for &i in &parts.val {
        assignment[i] = SplitName::Val;
    }
    for &i in &parts.test {
        assignment[i] = SplitName::Test;
    }
    let mut files = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let ext = if s.image.shape().c == 3 { "ppm" } else { "pgm" };
        let image = format!("images/{i:04}.{ext}");
        let mask = format!("masks/{i:04}.pgm");
        write_image(&dir.join(&image), &s.image)?;
        write_mask(&dir.join(&mask), &s.label, mask_scale)?;
        files.push(ManifestEntry { image, mask, split: assignment[i] });
    }
    let manifest = Manifest { mask_scale, split_seed, generator: generator.cloned(), files };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut ds = Dataset::default();
    for entry in &manifest.files {
        let image = read_image(&dir.join(&entry.image))?;
        let label = read_mask(&dir.join(&entry.mask), manifest.mask_scale)?;
        let s = image.shape();
        if (s.h, s.w) != (label.h, label.w) {
            return Err(Error::Data(format!("{} is {}×{} but its mask is {}×{}", entry.image, s.h, s.w, label.h, label.w)));
        }
        let sample = Sample { image, label };
        match entry.split {
            SplitName::Train => ds.train.push(sample),
            SplitName::Val => ds.val.push(sample),
            SplitName::Test => ds.test.push(sample),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        for (n, want) in [(100, (80, 10, 10)), (10, (8, 1, 1)), (250, (200, 25, 25)), (7, (7, 0, 0))] {
            let s = split_indices(n, 42);
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), want);
            let mut all: Vec<usize> = [s.train, s.val, s.test].concat();
            all.sort();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
        assert_eq!(split_indices(50, 3), split_indices(50, 3));
        assert_ne!(split_indices(50, 3), split_indices(50, 4));
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { count: 10, ..SynthConfig::default() };
        let samples = synth_generate(&cfg).unwrap();
        let manifest = write_dataset(dir.path(), &samples, 7, Some(&cfg)).unwrap();
        assert_eq!(manifest.mask_scale, 255);
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (8, 1, 1));
        let direct = Dataset::from_samples(&samples, 7);
        for (a, b) in ds.test.iter().zip(&direct.test) {
            assert_eq!(a.label, b.label);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn collate_stacks() {
        let cfg = SynthConfig { count: 2, ..SynthConfig::default() };
        let s = synth_generate(&cfg).unwrap();
        let (x, y) = collate(&[&s[0], &s[1]]).unwrap();
        assert_eq!(x.shape(), Shape::new(2, 3, 64, 64));
        assert_eq!(y.n, 2);
        assert!(collate(&[]).is_err());
    }
}
