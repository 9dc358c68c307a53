//! Overlap scores from hard predictions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// One-vs-rest counts for `class`.
pub fn confusion(pred: &LabelMask, gt: &LabelMask, class: u8) -> Result<ConfusionCounts> {
    if (pred.n, pred.h, pred.w) != (gt.n, gt.h, gt.w) {
        return Err(Error::shape(format!("prediction {} vs ground truth {}", pred.shape(), gt.shape())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p == class, g == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

pub const CSV_HEADER: &str = "method,accuracy,dice,iou,recall,precision";

/// `num / den`, with `0/0` scored 1 when the class is absent from both
/// masks and 0 otherwise.
fn ratio(num: u64, den: u64, absent: bool) -> f64 {
    if den == 0 {
        if absent {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn report(c: &ConfusionCounts) -> MetricReport {
    let absent = c.tp + c.fp + c.fn_ == 0;
    MetricReport {
        accuracy: ratio(c.tp + c.tn, c.total(), absent),
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, absent),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, absent),
        recall: ratio(c.tp, c.tp + c.fn_, absent),
        precision: ratio(c.tp, c.tp + c.fp, absent),
    }
}

impl MetricReport {
    pub fn values(&self) -> [f64; 5] {
        [self.accuracy, self.dice, self.iou, self.recall, self.precision]
    }

    fn from_values(v: [f64; 5]) -> Self {
        MetricReport { accuracy: v[0], dice: v[1], iou: v[2], recall: v[3], precision: v[4] }
    }

    /// Unweighted mean, accumulated in input order.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let mut acc = [0.0; 5];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let n = reports.len().max(1) as f64;
        Self::from_values(acc.map(|a| a / n))
    }

    pub fn csv_row(&self, method: &str) -> String {
        let mut row = method.to_string();
        for v in self.values() {
            write!(row, ",{v:.4}").unwrap();
        }
        row
    }
}

/// Scores of one image, averaged over foreground classes `1..classes`.
pub fn image_report(pred: &LabelMask, gt: &LabelMask, classes: usize) -> Result<MetricReport> {
    let reports = (1..classes.max(2)).map(|c| confusion(pred, gt, c as u8).map(|k| report(&k))).collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::mean(&reports))
}

/// Mean of per-image reports over a batch of predictions.
pub fn batch_reports(pred: &LabelMask, gt: &LabelMask, classes: usize) -> Result<Vec<MetricReport>> {
    (0..pred.n).map(|i| image_report(&pred.image_mask(i), &gt.image_mask(i), classes)).collect()
}

pub fn csv_table(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&r.csv_row(name));
        out.push('\n');
    }
    out
}
