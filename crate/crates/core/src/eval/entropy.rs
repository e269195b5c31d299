use std::fs;
use std::path::Path;

use serde::Serialize;

use super::EvalError;
use crate::nmt::{decode_limit, greedy_trace, ModelScorer, Seq2SeqModel};
use crate::softpred::entropy_of;

/// Entropies (nats) of the decoder's next-token distribution at every greedy
/// step, with an equal-width histogram over `[0, ln V]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyReport {
    pub vocab_size: usize,
    pub samples: usize,
    pub mean: f64,
    pub median: f64,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    #[serde(skip)]
    pub entropies: Vec<f64>,
}

impl EntropyReport {
    pub fn from_entropies(entropies: Vec<f64>, vocab_size: usize, bins: usize) -> Result<Self, EvalError> {
        if bins == 0 {
            return Err(EvalError::ZeroBins);
        }
        if entropies.is_empty() {
            return Err(EvalError::EmptyTestSet);
        }
        let top = (vocab_size as f64).ln();
        let entropies: Vec<f64> = entropies.into_iter().map(|h| h.clamp(0.0, top)).collect();
        let width = top / bins as f64;
        let edges = (0..=bins).map(|i| if i == bins { top } else { i as f64 * width }).collect();
        let mut counts = vec![0; bins];
        for &h in &entropies {
            let b = if width > 0.0 { ((h / width) as usize).min(bins - 1) } else { 0 };
            counts[b] += 1;
        }
        let mut sorted = entropies.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        let mean = entropies.iter().sum::<f64>() / n as f64;
        Ok(Self { vocab_size, samples: n, mean, median, edges, counts, entropies })
    }

    /// Histogram as CSV with columns `bin,lower,upper,count`.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Format(e.to_string()))?;
        w.write_record(["bin", "lower", "upper", "count"]).map_err(|e| EvalError::Format(e.to_string()))?;
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([i.to_string(), self.edges[i].to_string(), self.edges[i + 1].to_string(), c.to_string()])
                .map_err(|e| EvalError::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| EvalError::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| EvalError::Format(e.to_string()))?;
        fs::write(path, json).map_err(|e| EvalError::io(path, e))
    }
}

pub fn entropy_report(model: &Seq2SeqModel, sources: &[Vec<usize>], bins: usize) -> Result<EntropyReport, EvalError> {
    if bins == 0 {
        return Err(EvalError::ZeroBins);
    }
    if sources.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut entropies = Vec::new();
    for src in sources {
        let mut scorer = ModelScorer::new(model, src)?;
        let (_, steps) = greedy_trace(&mut scorer, decode_limit(src.len(), model.config().max_len))?;
        entropies.extend(steps.iter().map(|p| entropy_of(p)));
    }
    EntropyReport::from_entropies(entropies, model.tgt_vocab().len(), bins)
}
