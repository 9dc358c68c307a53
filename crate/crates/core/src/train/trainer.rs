use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::evaluate::{evaluate, LossSummary};
use crate::autodiff::Record;
use crate::data::{augment, collate, encode_checkpoint, read_dataset, synth_generate, AugmentConfig, Dataset, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::loss::{hybrid_loss, label_boundary, CannyConfig};
use crate::metrics::MetricReport;
use crate::network::{ModelConfig, NetworkParams};
use crate::ops::{self, Mode};
use crate::params::Module;

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Used when `data_dir` is absent.
    pub synth: SynthConfig,
    pub data_dir: Option<PathBuf>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Overrides `model.lambda` when set.
    pub lambda: Option<f64>,
    /// Drives the split, the batch order and augmentation.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub augment: AugmentConfig,
    pub canny: CannyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::micro(),
            synth: SynthConfig::default(),
            data_dir: None,
            batch_size: 8,
            learning_rate: 1e-3,
            max_epochs: 50,
            patience: 7,
            lambda: None,
            seed: 42,
            out_dir: None,
            augment: AugmentConfig::default(),
            canny: CannyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be a finite non-negative number"));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("patience and max_epochs must be at least 1"));
        }
        self.canny.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if let Some(l) = self.lambda {
            m.lambda = l;
        }
        m
    }

    /// Reads `data_dir` or generates and splits the synthetic set.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data_dir {
            Some(dir) => read_dataset(dir),
            None => Ok(Dataset::from_samples(&synth_generate(&self.synth)?, self.seed)),
        }
    }
}

/// Stops once the monitored value has not strictly improved for
/// `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::NEG_INFINITY, best_epoch: 0, stale: 0 }
    }

    /// Returns whether `value` is a new best.
    pub fn update(&mut self, epoch: usize, value: f64) -> bool {
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over training batches.
    pub train: LossSummary,
    pub val: MetricReport,
    pub val_loss: LossSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub stopped_early: bool,
    /// Test-split scores of the best checkpoint.
    pub test: Option<MetricReport>,
    /// File name inside the output directory.
    pub checkpoint: Option<String>,
    pub parameter_count: usize,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub best: NetworkParams<f32>,
}

/// Batches of `size` in `order`; a trailing single sample joins the
/// previous batch because training-mode BatchNorm needs two values.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn check_sizes(model: &ModelConfig, samples: &[Sample]) -> Result<()> {
    for s in samples {
        model.check_input(s.image.shape()).map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(())
}

/// One optimizer step on a batch; returns the loss terms.
fn train_step(
    params: &mut NetworkParams<f32>,
    learn: &mut [crate::tensor::Tensor<f32>],
    opt: &mut Adam,
    batch: &[Sample],
    canny: &CannyConfig,
) -> Result<LossSummary> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let (x, labels) = collate(&refs)?;
    let boundary = label_boundary(&labels, canny)?;
    let (loss, grads) = {
        let rec = Record::<f32>::begin()?;
        let tracked: Vec<_> = learn.iter().map(|t| rec.track(t)).collect();
        params.set_learnables(&tracked)?;
        let pred = params.forward(&x, Mode::Train)?;
        let probs = ops::softmax_channels(&pred.logits);
        let loss = hybrid_loss(&probs, pred.edge.as_ref(), &labels, &boundary, params.config.lambda)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {}", loss.total)));
        }
        let g = rec.backward(&loss.tensor)?;
        (loss, tracked.iter().map(|t| g.get_or_zeros(t)).collect::<Vec<_>>())
    };
    opt.step(learn, &grads)?;
    if let Some(bad) = learn.iter().position(|t| !t.all_finite()) {
        return Err(Error::NonFinite(format!("parameter tensor {bad} after an optimizer step")));
    }
    params.set_learnables(learn)?;
    Ok(LossSummary { total: loss.total, ce: loss.ce, dice: loss.dice, boundary: loss.boundary })
}

/// Trains on an already loaded dataset. Nothing is written to disk.
pub fn train_on(cfg: &TrainConfig, data: &Dataset, mut log: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data(format!("training needs non-empty train and validation splits (got {} / {})", data.train.len(), data.val.len())));
    }
    let model = cfg.model_config();
    for part in [&data.train, &data.val, &data.test] {
        check_sizes(&model, part)?;
    }
    let mut params = NetworkParams::<f32>::init(&model)?;
    let mut learn = params.learnables();
    let mut opt = Adam::new(cfg.learning_rate, &learn);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut epochs = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = LossSummary::default();
        let groups = batches(&order, cfg.batch_size);
        for idx in &groups {
            let batch: Vec<Sample> = idx.iter().map(|&i| augment(&data.train[i], &cfg.augment, &mut rng)).collect();
            let l = train_step(&mut params, &mut learn, &mut opt, &batch, &cfg.canny)?;
            sums.total += l.total;
            sums.ce += l.ce;
            sums.dice += l.dice;
            sums.boundary += l.boundary;
        }
        let k = groups.len() as f64;
        let train = LossSummary { total: sums.total / k, ce: sums.ce / k, dice: sums.dice / k, boundary: sums.boundary / k };
        let val = evaluate(&mut params, &data.val, cfg.batch_size, &cfg.canny, false)?;
        let record = EpochRecord { epoch, train, val: val.metrics, val_loss: val.loss };
        log(&record);
        epochs.push(record);
        if stopper.update(epoch, val.metrics.dice) {
            best = params.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }

    let test = if data.test.is_empty() { None } else { Some(evaluate(&mut best, &data.test, cfg.batch_size, &cfg.canny, false)?.metrics) };
    let report = TrainReport {
        stopped_early: stopper.should_stop(),
        epochs,
        best_epoch: stopper.best_epoch,
        best_val_dice: stopper.best,
        test,
        checkpoint: None,
        parameter_count: best.parameter_count(),
    };
    Ok(TrainOutcome { report, best })
}

/// Writes the best checkpoint and the report into `dir`.
pub fn write_outputs(dir: &Path, outcome: &mut TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CHECKPOINT_FILE), encode_checkpoint(&outcome.best)?)?;
    outcome.report.checkpoint = Some(CHECKPOINT_FILE.to_string());
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&outcome.report)? + "\n")?;
    Ok(())
}

pub fn train(cfg: &TrainConfig, log: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = cfg.dataset()?;
    let mut outcome = train_on(cfg, &data, log)?;
    if let Some(dir) = &cfg.out_dir {
        write_outputs(dir, &mut outcome)?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_counts_stale_epochs() {
        let mut s = EarlyStopping::new(2);
        assert!(s.update(1, 0.5));
        assert!(!s.update(2, 0.5));
        assert!(!s.should_stop());
        assert!(s.update(3, 0.6));
        assert!(!s.update(4, f64::NAN));
        assert!(!s.update(5, 0.1));
        assert!(s.should_stop());
        assert_eq!((s.best_epoch, s.best), (3, 0.6));
    }

    #[test]
    fn trailing_singleton_merges() {
        assert_eq!(batches(&[0, 1, 2, 3, 4], 2), vec![vec![0, 1], vec![2, 3, 4]]);
        assert_eq!(batches(&[7], 4), vec![vec![7]]);
        assert_eq!(batches(&[0, 1, 2, 3], 2).len(), 2);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
