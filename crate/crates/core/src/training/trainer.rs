use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    adam_step, bertscore_loss, nll_batch_loss, AdamHyper, Checkpoint, MetricsLog, MetricsRow, OptimizerState, Phase,
    TrainConfig, TrainError, TrainingMeta,
};
use crate::autodiff::{Graph, Tensor};
use crate::binfmt::round_to_f32;
use crate::corpus::Example;
use crate::eval::{corpus_bleu, evaluate, ClusterMap, Search};
use crate::lm::LmEncoder;
use crate::nmt::Seq2SeqModel;

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_DIR: &str = "best";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationScores {
    pub bleu: f64,
    pub fbert: f64,
}

/// Scores a model on held-out data between epochs.
pub trait Validator {
    fn validate(&mut self, model: &Seq2SeqModel) -> Result<ValidationScores, TrainError>;
}

/// Greedy decoding of a validation set, scored with corpus BLEU and mean F.
/// With `classes`, BLEU compares cluster ids instead of tokens.
pub struct GreedyValidator<'a> {
    pub lm: &'a LmEncoder,
    pub data: &'a [Example],
    pub classes: Option<&'a ClusterMap>,
}

impl<'a> GreedyValidator<'a> {
    pub fn new(lm: &'a LmEncoder, data: &'a [Example]) -> Self {
        Self { lm, data, classes: None }
    }

    pub fn with_classes(mut self, classes: &'a ClusterMap) -> Self {
        self.classes = Some(classes);
        self
    }
}

impl Validator for GreedyValidator<'_> {
    fn validate(&mut self, model: &Seq2SeqModel) -> Result<ValidationScores, TrainError> {
        let r = evaluate(model, self.lm, self.data, Search::Greedy)?;
        let bleu = match self.classes {
            None => r.bleu,
            Some(map) => {
                let v = self.lm.vocab();
                let cands: Vec<Vec<usize>> = r.hypotheses.iter().map(|h| map.class_ids(v, &v.strip(h))).collect();
                let refs: Vec<Vec<usize>> = self.data.iter().map(|ex| map.class_ids(v, &v.strip(&ex.target))).collect();
                corpus_bleu(&cands, &refs)?
            }
        };
        Ok(ValidationScores { bleu, fbert: r.fbert })
    }
}

/// Patience-based stopping on a higher-is-better metric.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, since_best: 0 }
    }

    /// Records a validation result; returns `(improved, stop)`.
    pub fn observe(&mut self, value: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|b| value > b);
        if improved {
            self.best = Some(value);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.since_best >= self.patience)
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Owns a model and its optimizer through one training phase.
pub struct Trainer<'a> {
    model: Seq2SeqModel,
    optimizer: OptimizerState,
    config: TrainConfig,
    phase: Phase,
    epoch: usize,
    step: u64,
    lm: Option<&'a LmEncoder>,
    train: &'a [Example],
}

impl<'a> Trainer<'a> {
    pub fn baseline(model: Seq2SeqModel, config: TrainConfig, train: &'a [Example]) -> Result<Self, TrainError> {
        config.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let optimizer = OptimizerState::new(model.params());
        Ok(Self { model, optimizer, config, phase: Phase::Baseline, epoch: 0, step: 0, lm: None, train })
    }

    /// Starts fine-tuning from trained weights with fresh optimizer moments.
    pub fn finetune(
        model: Seq2SeqModel,
        lm: &'a LmEncoder,
        config: TrainConfig,
        train: &'a [Example],
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if config.mode.is_none() {
            return Err(TrainError::Config("fine-tuning needs a prediction mode".into()));
        }
        if train.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        model.check_shared_vocab(lm)?;
        let optimizer = OptimizerState::new(model.params());
        Ok(Self { model, optimizer, config, phase: Phase::Finetune, epoch: 0, step: 0, lm: Some(lm), train })
    }

    /// Continues the run recorded in `ckpt`.
    pub fn resume(ckpt: Checkpoint, lm: Option<&'a LmEncoder>, train: &'a [Example]) -> Result<Self, TrainError> {
        let Checkpoint { model, optimizer, meta } = ckpt;
        if meta.phase == Phase::Finetune {
            let lm = lm.ok_or_else(|| TrainError::Config("resuming fine-tuning needs the scoring encoder".into()))?;
            model.check_shared_vocab(lm)?;
        }
        if train.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        Ok(Self { model, optimizer, config: meta.config, phase: meta.phase, epoch: meta.epoch, step: meta.step, lm, train })
    }

    pub fn model(&self) -> &Seq2SeqModel {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self, scores: Option<ValidationScores>) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            meta: TrainingMeta {
                phase: self.phase,
                epoch: self.epoch,
                step: self.step,
                config: self.config,
                valid_bleu: scores.map(|s| s.bleu),
                valid_fbert: scores.map(|s| s.fbert),
                lm_fingerprint: self.lm.map(LmEncoder::parameter_fingerprint),
            },
        }
    }

    fn batches(&self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(u64::MAX - self.epoch as u64);
        order.shuffle(&mut rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Loss and parameter gradients for one batch at the current step.
    pub fn loss_and_grads(&self, batch: &[Example]) -> Result<(f64, Vec<Tensor>), TrainError> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true);
        let loss = match self.phase {
            Phase::Baseline => nll_batch_loss(&mut g, &bound, batch, self.config.label_smoothing)?,
            Phase::Finetune => {
                let lm = self.lm.expect("fine-tuning trainer holds an encoder");
                let mode = self.config.mode.expect("validated at construction");
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(self.step);
                bertscore_loss(&mut g, &bound, lm, batch, mode, &mut rng)?
            }
        };
        let value = g.value(loss).item();
        let mut grads = g.backward(loss)?;
        let grads = bound.vars().iter().map(|&v| grads.take(v).expect("trainable parameter")).collect();
        Ok((value, grads))
    }

    /// Runs one epoch. `on_step` sees each completed step, its loss and the
    /// updated model. Parameters and moments are rounded to `f32` at the end
    /// so a checkpoint taken here resumes bit-for-bit.
    pub fn run_epoch<F>(&mut self, mut on_step: F) -> Result<f64, TrainError>
    where
        F: FnMut(u64, f64, bool, &Seq2SeqModel) -> Result<(), TrainError>,
    {
        let batches = self.batches();
        let mut total = 0.0;
        for (i, idx) in batches.iter().enumerate() {
            let batch: Vec<Example> = idx.iter().map(|&k| self.train[k].clone()).collect();
            let (loss, grads) = self.loss_and_grads(&batch)?;
            let h = AdamHyper {
                lr: self.config.lr_at(self.step + 1),
                beta1: self.config.beta1,
                beta2: self.config.beta2,
                epsilon: self.config.adam_epsilon,
            };
            adam_step(self.model.params_mut(), &grads, &mut self.optimizer, h)?;
            self.step += 1;
            total += loss;
            let last = i + 1 == batches.len();
            if last {
                self.round_state();
                self.epoch += 1;
            }
            on_step(self.step, loss, last, &self.model)?;
        }
        Ok(total / batches.len() as f64)
    }

    fn round_state(&mut self) {
        for set in [self.model.params_mut(), &mut self.optimizer.first, &mut self.optimizer.second] {
            for (_, t) in set.iter_mut() {
                round_to_f32(t.data_mut());
            }
        }
    }
}

/// Result of a training or fine-tuning run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Checkpoint with the best epoch-end selection metric.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub metrics: MetricsLog,
    /// Epoch-end validation scores in order.
    pub validations: Vec<ValidationScores>,
    /// Scores of the starting model (fine-tuning only).
    pub start_scores: Option<ValidationScores>,
    pub stopped_early: bool,
}

fn run_phase(
    mut trainer: Trainer<'_>,
    validator: &mut dyn Validator,
    out_dir: Option<&Path>,
    mut metrics: MetricsLog,
    start_scores: Option<ValidationScores>,
) -> Result<RunOutcome, TrainError> {
    let phase = trainer.phase();
    let select = |s: &ValidationScores| match phase {
        Phase::Baseline => s.bleu,
        Phase::Finetune => s.fbert,
    };
    let mut stopper = EarlyStopping::new(trainer.config().patience);
    let mut best: Option<Checkpoint> = None;
    let mut validations = Vec::new();
    let mut stopped_early = false;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::Io(format!("{}: {e}", dir.display())))?;
    }
    let eval_every = trainer.config().eval_every;
    let max_epochs = trainer.config().max_epochs;
    while trainer.epoch() < max_epochs {
        let epoch = trainer.epoch() + 1;
        let mut epoch_scores = None;
        trainer.run_epoch(|step, loss, last, model| {
            let mut row = MetricsRow {
                step,
                epoch,
                phase,
                train_loss: Some(loss),
                valid_bleu: None,
                valid_fbert: None,
                epoch_end: last,
            };
            if last || (eval_every > 0 && step % eval_every == 0) {
                let s = validator.validate(model)?;
                row.valid_bleu = Some(s.bleu);
                row.valid_fbert = Some(s.fbert);
                if last {
                    epoch_scores = Some(s);
                }
            }
            metrics.push(row);
            Ok(())
        })?;
        let scores = epoch_scores.expect("last step validates");
        validations.push(scores);
        let ckpt = trainer.checkpoint(Some(scores));
        let (improved, stop) = stopper.observe(select(&scores));
        if let Some(dir) = out_dir {
            ckpt.save(&dir.join(format!("epoch-{epoch}")))?;
            if improved {
                ckpt.save(&dir.join(BEST_DIR))?;
            }
            metrics.write_csv(&dir.join(METRICS_FILE))?;
        }
        if improved {
            best = Some(ckpt);
        }
        if stop {
            stopped_early = trainer.epoch() < max_epochs;
            break;
        }
    }
    let last = trainer.checkpoint(validations.last().copied());
    let best = match best {
        Some(b) => b,
        None => {
            if let Some(dir) = out_dir {
                last.save(&dir.join(BEST_DIR))?;
                metrics.write_csv(&dir.join(METRICS_FILE))?;
            }
            last.clone()
        }
    };
    Ok(RunOutcome { best, last, metrics, validations, start_scores, stopped_early })
}

/// Trains with label-smoothed NLL, validating every epoch and stopping once
/// validation BLEU has not improved for `patience` epochs.
pub fn train_baseline(
    model: Seq2SeqModel,
    train: &[Example],
    validator: &mut dyn Validator,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<RunOutcome, TrainError> {
    let trainer = Trainer::baseline(model, *config, train)?;
    run_phase(trainer, validator, out_dir, MetricsLog::default(), None)
}

/// Fine-tunes `start` against the negated F score under `config.mode`,
/// keeping the epoch with the best validation F. The first metrics row,
/// step 0, holds the starting model's scores.
pub fn finetune(
    start: &Checkpoint,
    lm: &LmEncoder,
    train: &[Example],
    validator: &mut dyn Validator,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<RunOutcome, TrainError> {
    let fingerprint = lm.parameter_fingerprint();
    let trainer = Trainer::finetune(start.model.clone(), lm, *config, train)?;
    let s = validator.validate(&start.model)?;
    let mut metrics = MetricsLog::default();
    metrics.push(MetricsRow {
        step: 0,
        epoch: 0,
        phase: Phase::Baseline,
        train_loss: None,
        valid_bleu: Some(s.bleu),
        valid_fbert: Some(s.fbert),
        epoch_end: false,
    });
    let outcome = run_phase(trainer, validator, out_dir, metrics, Some(s))?;
    if lm.parameter_fingerprint() != fingerprint {
        return Err(TrainError::Invalid("scoring encoder parameters changed during fine-tuning".into()));
    }
    Ok(outcome)
}
