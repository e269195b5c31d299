//! Greedy-alignment similarity scores over contextual embeddings.
//!
//! Recall averages, over reference tokens, the best cosine similarity to
//! any candidate token; precision does the same from the candidate side; F
//! is their harmonic mean. Hard scoring looks tokens up in the encoder's
//! embedding table, soft scoring takes expected embeddings and stays
//! differentiable. Both run the same graph code.

use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::lm::{LmEncoder, LmError};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("soft candidate width {got} does not match encoder width {expected}")]
    Width { expected: usize, got: usize },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
}

/// Precision, recall and F for one candidate/reference pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when either side had no tokens left after sentinel stripping;
    /// all three scores are then zero.
    pub empty: bool,
}

/// Harmonic mean of precision and recall; zero unless `p + r > 0`.
///
/// With opposite-signed inputs the raw value can leave `[-1, 1]`; it is
/// capped there.
pub fn f_score(precision: f64, recall: f64) -> f64 {
    let denom = precision + recall;
    if denom > 0.0 {
        (2.0 * precision * recall / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

impl ScoreTriple {
    pub fn new(precision: f64, recall: f64) -> Self {
        Self { precision, recall, f1: f_score(precision, recall), empty: false }
    }

    pub fn empty() -> Self {
        Self { precision: 0.0, recall: 0.0, f1: 0.0, empty: true }
    }
}

/// Cosine similarities, rows indexed by reference tokens and columns by
/// candidate tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "similarity matrix shape");
        Self { rows, cols, data }
    }

    /// Cosine similarity of every reference row with every candidate row.
    pub fn cosine(reference: &Tensor, candidate: &Tensor) -> Self {
        let norm = |t: &Tensor| -> Vec<Vec<f64>> {
            (0..t.rows())
                .map(|i| {
                    let r = t.row(i);
                    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::autodiff::NORM_FLOOR);
                    r.iter().map(|x| x / n).collect()
                })
                .collect()
        };
        let (rn, cn) = (norm(reference), norm(candidate));
        let mut data = Vec::with_capacity(rn.len() * cn.len());
        for r in &rn {
            for c in &cn {
                data.push(r.iter().zip(c).map(|(a, b)| a * b).sum());
            }
        }
        Self::new(rn.len(), cn.len(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Best match of every row and every column, lowest index on ties.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub row_argmax: Vec<usize>,
    pub row_max: Vec<f64>,
    pub col_argmax: Vec<usize>,
    pub col_max: Vec<f64>,
}

pub fn greedy_align(sim: &SimilarityMatrix) -> Alignment {
    let mut row_argmax = vec![0; sim.rows];
    let mut row_max = vec![f64::NEG_INFINITY; sim.rows];
    let mut col_argmax = vec![0; sim.cols];
    let mut col_max = vec![f64::NEG_INFINITY; sim.cols];
    for i in 0..sim.rows {
        for j in 0..sim.cols {
            let v = sim.get(i, j);
            if v > row_max[i] {
                row_max[i] = v;
                row_argmax[i] = j;
            }
            if v > col_max[j] {
                col_max[j] = v;
                col_argmax[j] = i;
            }
        }
    }
    Alignment { row_argmax, row_max, col_argmax, col_max }
}

/// Graph handles of a score; `None` fields mean the pair was empty.
#[derive(Debug, Clone, Copy)]
pub struct SoftScore {
    pub precision: Var,
    pub recall: Var,
    pub f1: Var,
    pub empty: bool,
}

impl SoftScore {
    pub fn values(&self, g: &Graph) -> ScoreTriple {
        if self.empty {
            return ScoreTriple::empty();
        }
        ScoreTriple {
            precision: g.value(self.precision).item(),
            recall: g.value(self.recall).item(),
            f1: g.value(self.f1).item(),
            empty: false,
        }
    }
}

fn empty_score(g: &mut Graph) -> SoftScore {
    let z = g.constant(Tensor::scalar(0.0));
    SoftScore { precision: z, recall: z, f1: z, empty: true }
}

/// Scores two `[n, d]` static-embedding sequences already on the graph.
fn score_static(g: &mut Graph, candidate: Var, reference: Var, lm: &LmEncoder) -> Result<SoftScore, ScoreError> {
    if g.value(candidate).rows() == 0 || g.value(reference).rows() == 0 {
        return Ok(empty_score(g));
    }
    let cand = lm.contextualize(g, candidate)?;
    let refr = lm.contextualize(g, reference)?;
    let cand = g.l2_normalize_rows(cand);
    let refr = g.l2_normalize_rows(refr);
    let sim = g.matmul_nt(refr, cand)?;
    let best_for_ref = g.row_max(sim)?;
    let recall = g.mean(best_for_ref)?;
    let best_for_cand = g.col_max(sim)?;
    let precision = g.mean(best_for_cand)?;

    let (p, r) = (g.value(precision).item(), g.value(recall).item());
    let raw = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    let f1 = if p + r > 0.0 && raw.abs() <= 1.0 {
        let pr = g.mul(precision, recall)?;
        let num = g.scale(pr, 2.0);
        let den = g.add(precision, recall)?;
        g.div(num, den)?
    } else {
        g.constant(Tensor::scalar(f_score(p, r)))
    };
    Ok(SoftScore { precision, recall, f1, empty: false })
}

/// Differentiable score of a soft candidate (`[k, d]` expected embeddings on
/// `g`) against reference token ids. Sentinels are stripped from the
/// reference; the candidate is taken as given.
pub fn score_soft_graph(
    g: &mut Graph,
    soft_candidate: Var,
    reference: &[usize],
    lm: &LmEncoder,
) -> Result<SoftScore, ScoreError> {
    let shape = g.value(soft_candidate).shape().to_vec();
    let width = if shape.len() == 2 { shape[1] } else { usize::MAX };
    if width != lm.dim() {
        return Err(ScoreError::Width { expected: lm.dim(), got: width });
    }
    let reference = lm.vocab().strip(reference);
    if reference.is_empty() || shape[0] == 0 {
        return Ok(empty_score(g));
    }
    let refr = g.constant(lm.embed_tokens(&reference)?);
    score_static(g, soft_candidate, refr, lm)
}

/// Value of [`score_soft_graph`] for a `[k, d]` tensor of expected embeddings.
pub fn score_soft(soft_candidate: &Tensor, reference: &[usize], lm: &LmEncoder) -> Result<ScoreTriple, ScoreError> {
    let mut g = Graph::new();
    let c = g.constant(soft_candidate.clone());
    Ok(score_soft_graph(&mut g, c, reference, lm)?.values(&g))
}

/// Score of candidate token ids against reference token ids, with bos, eos
/// and pad removed from both.
pub fn score_hard(candidate: &[usize], reference: &[usize], lm: &LmEncoder) -> Result<ScoreTriple, ScoreError> {
    let candidate = lm.vocab().strip(candidate);
    let reference = lm.vocab().strip(reference);
    if candidate.is_empty() || reference.is_empty() {
        return Ok(ScoreTriple::empty());
    }
    let mut g = Graph::new();
    let c = g.constant(lm.embed_tokens(&candidate)?);
    let r = g.constant(lm.embed_tokens(&reference)?);
    Ok(score_static(&mut g, c, r, lm)?.values(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{EmbeddingTable, Vocabulary};

    /// Sentinels at 0..4, `a` = 4 along x, `b` = 5 along y.
    fn orthonormal_lm() -> LmEncoder {
        let vocab = Vocabulary::with_sentinels(["a", "b"]).unwrap();
        let mut data = vec![0.0; 6 * 2];
        for s in 0..4 {
            data[s * 2] = -1.0;
        }
        data[4 * 2] = 1.0;
        data[5 * 2 + 1] = 1.0;
        LmEncoder::identity(vocab, EmbeddingTable::new(6, 2, data).unwrap(), 8).unwrap()
    }

    #[test]
    fn hand_case() {
        let lm = orthonormal_lm();
        let s = score_hard(&[4], &[4, 5], &lm).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 0.5, 2.0 / 3.0));
    }

    #[test]
    fn self_score_is_one_and_orthogonal_is_zero() {
        let lm = orthonormal_lm();
        let s = score_hard(&[4, 5, 4], &[4, 5, 4], &lm).unwrap();
        assert!((s.f1 - 1.0).abs() < 1e-12 && (s.precision - 1.0).abs() < 1e-12);
        let s = score_hard(&[4], &[5], &lm).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert!(!s.empty);
    }

    #[test]
    fn sentinels_are_stripped_and_empty_is_flagged() {
        let lm = orthonormal_lm();
        let v = lm.vocab().clone();
        let s = score_hard(&[v.bos(), 4, v.eos(), v.pad()], &[4], &lm).unwrap();
        assert_eq!(s.f1, 1.0);
        let s = score_hard(&[v.bos(), v.eos()], &[4], &lm).unwrap();
        assert!(s.empty);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn soft_one_hot_matches_hard() {
        let lm = orthonormal_lm();
        let cand = lm.embed_tokens(&[5, 4]).unwrap();
        let soft = score_soft(&cand, &[4, 5], &lm).unwrap();
        let hard = score_hard(&[5, 4], &[4, 5], &lm).unwrap();
        assert_eq!(soft, hard);
    }

    #[test]
    fn width_mismatch_rejected() {
        let lm = orthonormal_lm();
        let bad = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(score_soft(&bad, &[4], &lm), Err(ScoreError::Width { expected: 2, got: 3 })));
    }

    #[test]
    fn greedy_align_identity_and_ties() {
        let id = SimilarityMatrix::new(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let a = greedy_align(&id);
        assert_eq!(a.row_argmax, vec![0, 1, 2]);
        assert_eq!(a.col_argmax, vec![0, 1, 2]);
        assert_eq!(a.row_max, vec![1.0; 3]);
        let c = greedy_align(&SimilarityMatrix::new(2, 3, vec![0.5; 6]));
        assert_eq!(c.row_argmax, vec![0, 0]);
        assert_eq!(c.col_argmax, vec![0, 0, 0]);
    }

    #[test]
    fn f_score_rules() {
        assert_eq!(f_score(0.0, 0.0), 0.0);
        assert_eq!(f_score(-0.5, 0.2), 0.0);
        assert!((f_score(0.9, -0.1) + 0.225).abs() < 1e-12);
        assert_eq!(f_score(1.0, -0.5), -1.0);
        assert_eq!(f_score(1.0, 0.5), 2.0 / 3.0);
    }
}
