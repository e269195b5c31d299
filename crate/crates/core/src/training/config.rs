use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::softpred::PredictionMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Linear warm-up from `warmup_init_lr`, then decay with the inverse
    /// square root of the step.
    InverseSqrt,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Sentences per batch.
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub label_smoothing: f64,
    pub schedule: Schedule,
    pub warmup_steps: u64,
    pub warmup_init_lr: f64,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    /// Soft prediction used by fine-tuning; unused by the baseline.
    pub mode: Option<PredictionMode>,
    pub seed: u64,
    /// Validate every this many steps inside an epoch (0: epoch ends only).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

impl TrainConfig {
    pub fn baseline() -> Self {
        Self {
            batch_size: 16,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            adam_epsilon: super::ADAM_EPSILON,
            label_smoothing: 0.1,
            schedule: Schedule::InverseSqrt,
            warmup_steps: 200,
            warmup_init_lr: 1e-7,
            patience: 3,
            max_epochs: 30,
            mode: None,
            seed: 0,
            eval_every: 0,
        }
    }

    /// Fine-tuning settings derived from a baseline configuration: a tenth
    /// of its learning rate, held constant, for at most five epochs.
    pub fn finetune_from(base: &TrainConfig, mode: PredictionMode) -> Self {
        Self {
            lr: base.lr / 10.0,
            schedule: Schedule::Constant,
            max_epochs: 5,
            mode: Some(mode),
            eval_every: 25,
            ..*base
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0) || !(self.warmup_init_lr > 0.0) || !(self.adam_epsilon > 0.0) {
            return bad(format!("rates must be positive (lr {}, warm-up {})", self.lr, self.warmup_init_lr));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) outside [0, 1)", self.beta1, self.beta2));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if let Some(m) = self.mode {
            m.validate()?;
        }
        Ok(())
    }

    /// Learning rate for 1-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::InverseSqrt => {
                let step = step.max(1) as f64;
                let warm = self.warmup_steps as f64;
                if self.warmup_steps > 0 && step <= warm {
                    self.warmup_init_lr + (self.lr - self.warmup_init_lr) * step / warm
                } else {
                    self.lr * (warm.max(1.0) / step).sqrt()
                }
            }
        }
    }
}
