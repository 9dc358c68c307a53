use serde::{Deserialize, Serialize};

use crate::data::{collate, Sample};
use crate::error::Result;
use crate::loss::{hybrid_loss, label_boundary, CannyConfig};
use crate::mask::Mask;
use crate::metrics::{batch_reports, MetricReport};
use crate::network::NetworkParams;
use crate::ops::{self, Mode};

/// Sample-weighted means of the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub boundary: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricReport,
    pub per_image: Vec<MetricReport>,
    pub loss: LossSummary,
}

/// Inference-mode pass over `samples` in fixed order.
///
/// With `oracle` set, the one-hot ground truth replaces the network's
/// logits, which must score 1 on every metric.
pub fn evaluate(params: &mut NetworkParams<f32>, samples: &[Sample], batch: usize, canny: &CannyConfig, oracle: bool) -> Result<Evaluation> {
    let classes = params.config.classes;
    let lambda = params.config.lambda;
    let mut per_image = Vec::with_capacity(samples.len());
    let mut sums = LossSummary::default();
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, labels) = collate(&refs)?;
        let pred = params.forward(&x, Mode::Eval)?;
        let probs = if oracle { labels.one_hot(classes)? } else { ops::softmax_channels(&pred.logits) };
        let boundary = label_boundary(&labels, canny)?;
        let edge = if oracle { pred.edge.as_ref().map(|_| boundary.to_tensor()) } else { pred.edge };
        let loss = hybrid_loss(&probs, edge.as_ref(), &labels, &boundary, lambda)?;
        let k = chunk.len() as f64;
        sums.total += k * loss.total;
        sums.ce += k * loss.ce;
        sums.dice += k * loss.dice;
        sums.boundary += k * loss.boundary;
        per_image.extend(batch_reports(&Mask::argmax(&probs), &labels, classes)?);
    }
    let n = samples.len().max(1) as f64;
    let loss = LossSummary { total: sums.total / n, ce: sums.ce / n, dice: sums.dice / n, boundary: sums.boundary / n };
    Ok(Evaluation { metrics: MetricReport::mean(&per_image), per_image, loss })
}
