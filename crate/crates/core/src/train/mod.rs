//! Optimizer, training loop, evaluation, inference and ablation runs.

mod ablate;
mod adam;
mod evaluate;
mod infer;
mod trainer;

pub use ablate::{ablate, ablation_csv, variant_config, AblationRow, ABLATION_FILE, VARIANTS};
pub use adam::{Adam, ADAM_EPS, BETA1, BETA2};
pub use evaluate::{evaluate, Evaluation, LossSummary};
pub use infer::{infer, InferOutput};
pub use trainer::{train, train_on, write_outputs, EarlyStopping, EpochRecord, TrainConfig, TrainOutcome, TrainReport, CHECKPOINT_FILE, REPORT_FILE};
