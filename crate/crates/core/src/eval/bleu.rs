//! Corpus BLEU over token sequences: order 4, brevity penalty on corpus
//! totals, add-one smoothing for any order with no matches.

use std::collections::HashMap;
use std::hash::Hash;

use super::EvalError;

pub const MAX_ORDER: usize = 4;

/// Summed n-gram statistics for a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BleuStats {
    /// Clipped matches per order 1..=4.
    pub matches: [usize; MAX_ORDER],
    /// Candidate n-grams per order.
    pub totals: [usize; MAX_ORDER],
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn add_sentence<T: Eq + Hash>(&mut self, candidate: &[T], reference: &[T]) {
        self.candidate_len += candidate.len();
        self.reference_len += reference.len();
        for n in 1..=MAX_ORDER {
            let cand = ngram_counts(candidate, n);
            let refs = ngram_counts(reference, n);
            self.totals[n - 1] += candidate.len().saturating_sub(n - 1);
            self.matches[n - 1] += cand.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }

    /// Modified precision for order `n` (1-based), smoothed when no
    /// n-gram of that order matched.
    pub fn precision(&self, n: usize) -> f64 {
        let (m, t) = (self.matches[n - 1], self.totals[n - 1]);
        if m == 0 {
            1.0 / (t as f64 + 1.0)
        } else {
            m as f64 / t as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        if self.candidate_len == 0 {
            0.0
        } else if c > r {
            1.0
        } else {
            (1.0 - r / c).exp()
        }
    }

    /// Score as a percentage in `[0, 100]`.
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let log_mean = (1..=MAX_ORDER).map(|n| self.precision(n).ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * self.brevity_penalty() * log_mean.exp()
    }
}

pub fn corpus_bleu_stats<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuStats, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::CountMismatch { candidates: candidates.len(), references: references.len() });
    }
    let mut stats = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        stats.add_sentence(c, r);
    }
    Ok(stats)
}

pub fn corpus_bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64, EvalError> {
    Ok(corpus_bleu_stats(candidates, references)?.score())
}
