//! Baseline training with label-smoothed NLL and fine-tuning against the
//! differentiable F score, with Adam, early stopping and checkpoints.

mod adam;
mod checkpoint;
mod config;
mod loss;
mod metrics;
mod trainer;

pub use adam::{adam_step, AdamHyper, OptimizerState, ADAM_EPSILON};
pub use checkpoint::{Checkpoint, TrainingMeta, CKPT_BLOB, CKPT_FILE};
pub use config::{Schedule, TrainConfig};
pub use loss::{bertscore_loss, label_smoothed_nll, label_smoothed_nll_sum, nll_batch_loss, soft_predictions, soft_score_loss};
pub use metrics::{MetricsLog, MetricsRow};
pub use trainer::{
    finetune, train_baseline, EarlyStopping, GreedyValidator, RunOutcome, Trainer, ValidationScores, Validator,
    BEST_DIR, METRICS_FILE,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::bertscore::ScoreError;
use crate::eval::EvalError;
use crate::lm::LmError;
use crate::nmt::ModelError;
use crate::softpred::SoftPredError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Baseline,
    Finetune,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{rows} prediction rows for {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite gradient {value} for parameter {parameter}")]
    NonFiniteGradient { parameter: String, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    SoftPred(#[from] SoftPredError),
}
