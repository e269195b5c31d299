//! `ckpt.json` + `ckpt.bin`: model parameters and Adam moments as
//! little-endian `f32`, plus the configuration needed to resume.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{OptimizerState, Phase, TrainConfig, TrainError};
use crate::autodiff::Tensor;
use crate::binfmt;
use crate::lm::{Sentinels, Vocabulary};
use crate::nmt::{ModelConfig, ParamSet, Seq2SeqModel};

pub const CKPT_SCHEMA_VERSION: u32 = 1;
pub const CKPT_FILE: &str = "ckpt.json";
pub const CKPT_BLOB: &str = "ckpt.bin";

/// Where a run stood when the checkpoint was taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub phase: Phase,
    /// Completed epochs in this phase.
    pub epoch: usize,
    /// Completed optimizer steps in this phase.
    pub step: u64,
    pub config: TrainConfig,
    pub valid_bleu: Option<f64>,
    pub valid_fbert: Option<f64>,
    /// Fingerprint of the scoring encoder used while fine-tuning.
    pub lm_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Seq2SeqModel,
    pub optimizer: OptimizerState,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    sentinels: Sentinels,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    model: ModelConfig,
    src_vocab: VocabFile,
    tgt_vocab: VocabFile,
    /// Parameter tensors; the blob stores them, then the first moments,
    /// then the second moments, in this order.
    tensors: Vec<TensorEntry>,
    optimizer_step: u64,
    meta: TrainingMeta,
    blob: String,
    sha256: String,
}

fn vocab_file(v: &Vocabulary) -> VocabFile {
    VocabFile { tokens: v.tokens().to_vec(), sentinels: v.sentinels() }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io(format!("{}: {e}", path.display()))
}

impl Checkpoint {
    /// Writes `ckpt.json` and `ckpt.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, TrainError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let params = self.model.params();
        let mut blob = Vec::new();
        for set in [params, &self.optimizer.first, &self.optimizer.second] {
            for (_, t) in set.iter() {
                binfmt::push_f32_le(&mut blob, t.data());
            }
        }
        let manifest = Manifest {
            schema_version: CKPT_SCHEMA_VERSION,
            model: *self.model.config(),
            src_vocab: vocab_file(self.model.src_vocab()),
            tgt_vocab: vocab_file(self.model.tgt_vocab()),
            tensors: params.iter().map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
            optimizer_step: self.optimizer.step,
            meta: self.meta.clone(),
            blob: CKPT_BLOB.into(),
            sha256: binfmt::sha256_hex(&blob),
        };
        let blob_path = dir.join(CKPT_BLOB);
        fs::write(&blob_path, &blob).map_err(io(&blob_path))?;
        let path = dir.join(CKPT_FILE);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        fs::write(&path, json).map_err(io(&path))?;
        Ok(path)
    }

    /// Loads from a `ckpt.json` path or the directory holding it.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let path = if path.is_dir() { path.join(CKPT_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        if m.schema_version != CKPT_SCHEMA_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported schema version {}", m.schema_version)));
        }
        let blob_path = path.parent().unwrap_or(Path::new(".")).join(&m.blob);
        let blob = fs::read(&blob_path).map_err(io(&blob_path))?;
        let actual = binfmt::sha256_hex(&blob);
        if !actual.eq_ignore_ascii_case(&m.sha256) {
            return Err(TrainError::Checkpoint(format!("checksum mismatch: manifest {}, blob {actual}", m.sha256)));
        }
        let values = binfmt::read_f32_le(&blob).ok_or_else(|| TrainError::Checkpoint("blob length is not a multiple of 4".into()))?;
        let per_set: usize = m.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if values.len() != 3 * per_set {
            return Err(TrainError::Checkpoint(format!("blob holds {} values, expected {}", values.len(), 3 * per_set)));
        }
        let mut offset = 0;
        let mut sets = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut entries = Vec::with_capacity(m.tensors.len());
            for t in &m.tensors {
                let n: usize = t.shape.iter().product();
                let tensor = Tensor::new(t.shape.clone(), values[offset..offset + n].to_vec())
                    .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
                entries.push((t.name.clone(), tensor));
                offset += n;
            }
            sets.push(ParamSet::new(entries));
        }
        let second = sets.pop().expect("three sets");
        let first = sets.pop().expect("three sets");
        let params = sets.pop().expect("three sets");
        let src = Vocabulary::new(m.src_vocab.tokens, m.src_vocab.sentinels)?;
        let tgt = Vocabulary::new(m.tgt_vocab.tokens, m.tgt_vocab.sentinels)?;
        let model = Seq2SeqModel::from_parts(m.model, src, tgt, params)?;
        Ok(Self { model, optimizer: OptimizerState { first, second, step: m.optimizer_step }, meta: m.meta })
    }
}
