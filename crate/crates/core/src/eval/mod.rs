//! Evaluation: corpus BLEU, sentence-level scoring, entropy histograms,
//! curve export and the synthetic synonym task.

mod bleu;
mod curves;
mod entropy;
mod synthetic;

pub use bleu::{corpus_bleu, corpus_bleu_stats, BleuStats, MAX_ORDER};
pub use curves::{curves_from_rows, export_curves, Curves, Point};
pub use entropy::{entropy_report, EntropyReport};
pub use synthetic::{
    cluster_exact_match, generate_synthetic, make_synthetic_corpus, sample_reference, source_token, target_token,
    ClusterMap, SyntheticSpec, SyntheticTask, CLUSTERS_FILE, CROSS_CLUSTER_MAX, LM_DIR, WITHIN_CLUSTER_MIN,
};

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::bertscore::{score_hard, ScoreError};
use crate::corpus::{CorpusError, Example};
use crate::lm::{LmEncoder, LmError};
use crate::nmt::{decode_limit, ModelError, Seq2SeqModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{candidates} candidates but {references} references")]
    CountMismatch { candidates: usize, references: usize },
    #[error("invalid synthetic task: {0}")]
    InvalidSpec(String),
    #[error("embedding geometry check failed: {0}")]
    Geometry(String),
    #[error("{0}")]
    Format(String),
    #[error("line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("histogram needs at least one bin")]
    ZeroBins,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

impl EvalError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        EvalError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Search {
    Greedy,
    Beam { size: usize, alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub sentences: usize,
    /// Corpus BLEU, percentage.
    pub bleu: f64,
    /// Mean sentence-level scores.
    pub precision: f64,
    pub recall: f64,
    pub fbert: f64,
    /// Mean length-normalised search score of the chosen hypotheses
    /// (beam search only).
    pub mean_search_score: Option<f64>,
    #[serde(skip)]
    pub hypotheses: Vec<Vec<usize>>,
}

/// Decodes every source and scores the outputs against the references.
pub fn evaluate(model: &Seq2SeqModel, lm: &LmEncoder, data: &[Example], search: Search) -> Result<EvalReport, EvalError> {
    model.check_shared_vocab(lm)?;
    if data.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut hypotheses = Vec::with_capacity(data.len());
    let mut search_total = 0.0;
    for ex in data {
        let cap = decode_limit(ex.source.len(), model.config().max_len);
        let hyp = match search {
            Search::Greedy => model.greedy_decode(&ex.source, cap)?,
            Search::Beam { size, alpha } => {
                let h = model.beam_decode(&ex.source, size, alpha, cap)?;
                search_total += h.score;
                h.tokens
            }
        };
        hypotheses.push(hyp);
    }
    let references: Vec<Vec<usize>> = data.iter().map(|ex| lm.vocab().strip(&ex.target)).collect();
    let candidates: Vec<Vec<usize>> = hypotheses.iter().map(|h| lm.vocab().strip(h)).collect();
    let bleu = corpus_bleu(&candidates, &references)?;
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for (c, refr) in candidates.iter().zip(&references) {
        let s = score_hard(c, refr, lm)?;
        p += s.precision;
        r += s.recall;
        f += s.f1;
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        sentences: data.len(),
        bleu,
        precision: p / n,
        recall: r / n,
        fbert: f / n,
        mean_search_score: matches!(search, Search::Beam { .. }).then(|| search_total / n),
        hypotheses,
    })
}
