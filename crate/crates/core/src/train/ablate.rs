use std::fs;

use serde::{Deserialize, Serialize};

use super::trainer::{train_on, write_outputs, EpochRecord, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::metrics::{csv_table, MetricReport};

pub const ABLATION_FILE: &str = "ablation.csv";

/// Variant names with their `(mgfi_upper, mgfi_lower, ae)` switches.
pub const VARIANTS: [(&str, bool, bool, bool); 5] = [
    ("full", true, true, true),
    ("no-mgfi-upper", false, true, true),
    ("no-mgfi-lower", true, false, true),
    ("no-mgfi", false, false, true),
    ("no-ae", true, true, false),
];

pub fn variant_config(base: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let &(_, upper, lower, ae) = VARIANTS.iter().find(|v| v.0 == name).ok_or_else(|| Error::invalid(format!("unknown ablation variant {name:?}")))?;
    let mut cfg = base.clone();
    cfg.model.mgfi_upper = upper;
    cfg.model.mgfi_lower = lower;
    cfg.model.ae = ae;
    cfg.out_dir = base.out_dir.as_ref().map(|d| d.join(name));
    Ok(cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub metrics: MetricReport,
    pub report: TrainReport,
}

/// Trains and tests every variant on the same data and seed. Scores are
/// reported as measured; no ordering between variants is assumed.
pub fn ablate(base: &TrainConfig, mut log: impl FnMut(&str, &EpochRecord)) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let data = base.dataset()?;
    if data.test.is_empty() {
        return Err(Error::Data("ablation needs a non-empty test split".into()));
    }
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for (name, ..) in VARIANTS {
        let cfg = variant_config(base, name)?;
        let mut outcome = train_on(&cfg, &data, |r| log(name, r))?;
        if let Some(dir) = &cfg.out_dir {
            write_outputs(dir, &mut outcome)?;
        }
        let metrics = outcome.report.test.expect("test split is non-empty");
        rows.push(AblationRow { name: name.to_string(), metrics, report: outcome.report });
    }
    if let Some(dir) = &base.out_dir {
        fs::write(dir.join(ABLATION_FILE), ablation_csv(&rows))?;
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let table: Vec<(String, MetricReport)> = rows.iter().map(|r| (r.name.clone(), r.metrics)).collect();
    csv_table(&table)
}
