//! Greedy and beam search over any next-token scorer.

use super::{BoundModel, ModelError, Seq2SeqModel};
use crate::autodiff::{Graph, Var};
use crate::softpred::argmax;

/// Next-token log-probabilities given a prefix that starts with `<bos>`.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn bos(&self) -> usize;
    fn eos(&self) -> usize;
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, ModelError>;
}

/// Decodes one source sentence with a trained model. The encoder runs once;
/// each step re-runs the decoder on the prefix and then drops those nodes.
pub struct ModelScorer<'m> {
    model: &'m Seq2SeqModel,
    graph: Graph,
    bound: BoundModel<'m>,
    memory: Var,
    mark: usize,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Seq2SeqModel, source: &[usize]) -> Result<Self, ModelError> {
        let mut graph = Graph::new();
        let bound = model.bind(&mut graph, false);
        let memory = bound.encode(&mut graph, source)?;
        let mark = graph.len();
        Ok(Self { model, graph, bound, memory, mark })
    }

    /// Largest number of generated tokens the position table allows.
    pub fn length_cap(&self) -> usize {
        self.model.config().max_len
    }
}

fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.tgt_vocab().len()
    }

    fn bos(&self) -> usize {
        self.model.tgt_vocab().bos()
    }

    fn eos(&self) -> usize {
        self.model.tgt_vocab().eos()
    }

    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        let logits = self.bound.decoder_logits(&mut self.graph, self.memory, prefix);
        let out = logits.map(|l| {
            let t = self.graph.value(l);
            log_softmax_row(t.row(t.rows() - 1))
        });
        self.graph.truncate(self.mark);
        out
    }
}

fn prefixed(bos: usize, tokens: &[usize]) -> Vec<usize> {
    let mut p = Vec::with_capacity(tokens.len() + 1);
    p.push(bos);
    p.extend_from_slice(tokens);
    p
}

/// Greedy decoding. Returns the generated tokens without `<eos>`.
pub fn greedy_decode<S: StepScorer>(scorer: &mut S, max_len: usize) -> Result<Vec<usize>, ModelError> {
    Ok(greedy_trace(scorer, max_len)?.0)
}

/// Greedy decoding that also returns the next-token distribution
/// (probabilities) seen at every step, including the step that chose `<eos>`.
pub fn greedy_trace<S: StepScorer>(scorer: &mut S, max_len: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>), ModelError> {
    let (bos, eos) = (scorer.bos(), scorer.eos());
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    for _ in 0..max_len {
        let lp = scorer.log_probs(&prefixed(bos, &tokens))?;
        let next = argmax(&lp);
        steps.push(lp.iter().map(|x| x.exp()).collect());
        if next == eos {
            break;
        }
        tokens.push(next);
    }
    Ok((tokens, steps))
}

/// A finished beam hypothesis. `tokens` excludes `<eos>`; `length` counts
/// it when the hypothesis ended on `<eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub length: usize,
    pub score: f64,
}

/// Length-normalised score `log_prob / length^alpha`.
pub fn normalized_score(log_prob: f64, length: usize, alpha: f64) -> f64 {
    log_prob / (length as f64).powf(alpha)
}

/// Beam search.
///
/// Each step expands every live hypothesis over the whole vocabulary and
/// ranks candidates by normalised score. Candidates ending in `<eos>`, or
/// reaching `max_len` tokens, are finished if they rank inside the beam;
/// the best `beam_size` unfinished ones stay live. Search stops once
/// `beam_size` hypotheses have finished, nothing is live, or `max_len` is
/// reached. Ties go to the earlier candidate.
pub fn beam_decode<S: StepScorer>(
    scorer: &mut S,
    beam_size: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Hypothesis, ModelError> {
    if beam_size == 0 {
        return Err(ModelError::ZeroBeam);
    }
    if !(alpha >= 0.0) {
        return Err(ModelError::NegativeLengthPenalty(alpha));
    }
    let (bos, eos, v) = (scorer.bos(), scorer.eos(), scorer.vocab_size());
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 1..=max_len {
        let mut candidates: Vec<(f64, f64, usize, usize)> = Vec::with_capacity(live.len() * v);
        for (hi, (tokens, lp)) in live.iter().enumerate() {
            let next = scorer.log_probs(&prefixed(bos, tokens))?;
            for (tok, l) in next.iter().enumerate() {
                let total = lp + l;
                candidates.push((normalized_score(total, step, alpha), total, hi, tok));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next_live = Vec::with_capacity(beam_size);
        for (rank, &(score, total, hi, tok)) in candidates.iter().enumerate() {
            if rank >= beam_size && next_live.len() >= beam_size {
                break;
            }
            let done = tok == eos || step == max_len;
            if done {
                if rank < beam_size {
                    let mut tokens = live[hi].0.clone();
                    if tok != eos {
                        tokens.push(tok);
                    }
                    finished.push(Hypothesis { tokens, log_prob: total, length: step, score });
                }
            } else if next_live.len() < beam_size {
                let mut tokens = live[hi].0.clone();
                tokens.push(tok);
                next_live.push((tokens, total));
            }
        }
        live = next_live;
        if finished.len() >= beam_size || live.is_empty() {
            break;
        }
    }
    let mut best: Option<Hypothesis> = None;
    for h in finished {
        if best.as_ref().is_none_or(|b| h.score > b.score) {
            best = Some(h);
        }
    }
    Ok(best.unwrap_or(Hypothesis { tokens: Vec::new(), log_prob: 0.0, length: 0, score: 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    /// Deterministic pseudo-random table of log-probabilities per prefix.
    struct TableScorer {
        v: usize,
        eos: usize,
        seed: u64,
        cache: HashMap<Vec<usize>, Vec<f64>>,
    }

    impl StepScorer for TableScorer {
        fn vocab_size(&self) -> usize {
            self.v
        }
        fn bos(&self) -> usize {
            self.v
        }
        fn eos(&self) -> usize {
            self.eos
        }
        fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
            let (v, seed) = (self.v, self.seed);
            Ok(self
                .cache
                .entry(prefix.to_vec())
                .or_insert_with(|| {
                    let h = prefix.iter().fold(seed, |a, &t| a.wrapping_mul(31).wrapping_add(t as u64 + 1));
                    let mut rng = ChaCha8Rng::seed_from_u64(h);
                    let z: Vec<f64> = (0..v).map(|_| rng.random_range(-2.0..2.0)).collect();
                    log_softmax_row(&z)
                })
                .clone())
        }
    }

    fn exhaustive(s: &mut TableScorer, max_len: usize, alpha: f64) -> (Vec<usize>, f64) {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        while let Some((tokens, lp)) = stack.pop() {
            let mut prefix = vec![s.bos()];
            prefix.extend(&tokens);
            let next = s.log_probs(&prefix).unwrap();
            for tok in 0..s.v {
                let total = lp + next[tok];
                let len = tokens.len() + 1;
                if tok == s.eos || len == max_len {
                    let score = normalized_score(total, len, alpha);
                    if score > best.1 {
                        let mut t = tokens.clone();
                        if tok != s.eos {
                            t.push(tok);
                        }
                        best = (t, score);
                    }
                } else {
                    let mut t = tokens.clone();
                    t.push(tok);
                    stack.push((t, total));
                }
            }
        }
        best
    }

    #[test]
    fn wide_beam_matches_exhaustive_search() {
        for seed in 0..20 {
            for alpha in [0.0, 0.6, 1.0] {
                let mut s = TableScorer { v: 4, eos: 2, seed, cache: HashMap::new() };
                let (tokens, score) = exhaustive(&mut s, 3, alpha);
                let h = beam_decode(&mut s, 64, alpha, 3).unwrap();
                assert_eq!(h.tokens, tokens, "seed {seed} alpha {alpha}");
                assert!((h.score - score).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..30 {
            let mut s = TableScorer { v: 6, eos: 0, seed, cache: HashMap::new() };
            let greedy = greedy_decode(&mut s, 7).unwrap();
            assert_eq!(beam_decode(&mut s, 1, 1.0, 7).unwrap().tokens, greedy, "seed {seed}");
        }
    }

    struct LengthScorer;

    impl StepScorer for LengthScorer {
        fn vocab_size(&self) -> usize {
            3
        }
        fn bos(&self) -> usize {
            0
        }
        fn eos(&self) -> usize {
            1
        }
        // After <bos>: eos -1.0, token 2 -0.6. After token 2: eos -0.6.
        fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
            Ok(if prefix.len() == 1 { vec![-50.0, -1.0, -0.6] } else { vec![-50.0, -0.6, -50.0] })
        }
    }

    #[test]
    fn length_penalty_can_prefer_longer_output() {
        let short = beam_decode(&mut LengthScorer, 2, 0.0, 4).unwrap();
        assert!(short.tokens.is_empty());
        assert!((short.log_prob + 1.0).abs() < 1e-12);
        let long = beam_decode(&mut LengthScorer, 2, 1.0, 4).unwrap();
        assert_eq!(long.tokens, vec![2]);
        assert!((long.score + 0.6).abs() < 1e-12);
    }

    #[test]
    fn zero_beam_is_rejected() {
        assert!(matches!(beam_decode(&mut LengthScorer, 0, 1.0, 4), Err(ModelError::ZeroBeam)));
    }

    #[test]
    fn model_scorer_matches_teacher_forcing() {
        use crate::lm::Vocabulary;
        use crate::nmt::ModelConfig;
        let sv = Vocabulary::with_sentinels(["x", "y"]).unwrap();
        let tv = Vocabulary::with_sentinels(["a", "b", "c"]).unwrap();
        let cfg = ModelConfig { encoder_layers: 1, decoder_layers: 1, d_model: 8, heads: 2, ff_dim: 8, max_len: 8 };
        let m = Seq2SeqModel::init(cfg, sv, tv, 5).unwrap();
        let reference = [1, 4, 6, 5, 2];
        let rows = m.teacher_forced_probs(&[4, 5], &reference).unwrap();
        let mut s = ModelScorer::new(&m, &[4, 5]).unwrap();
        for j in 0..rows.len() {
            let lp = s.log_probs(&reference[..=j]).unwrap();
            for (a, b) in lp.iter().zip(rows[j].probs()) {
                assert!((a.exp() - b).abs() < 1e-12);
            }
        }
        let (tokens, steps) = greedy_trace(&mut s, 5).unwrap();
        assert!(tokens.len() <= 5);
        assert!(steps.len() == tokens.len() + 1 || (tokens.len() == 5 && steps.len() == 5));
        assert_eq!(m.beam_decode(&[4, 5], 1, 0.0, 5).unwrap().tokens, m.greedy_decode(&[4, 5], 5).unwrap());
    }
}
