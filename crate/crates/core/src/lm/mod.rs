//! The frozen language model used for scoring: a static embedding table plus
//! an optional stack of transformer encoder layers.

mod format;
mod vocab;

pub use format::{LmManifest, TensorEntry, LM_SCHEMA_VERSION};
pub use vocab::{Sentinels, Vocabulary, BOS, EOS, PAD, UNK};

use std::io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::binfmt;
use crate::layers::{self, AttentionVars, FeedForwardVars, NormVars};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("checksum mismatch: manifest says {expected}, blob hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("missing or invalid sentinel: {0}")]
    MissingSentinel(String),
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("non-finite parameter in {0}")]
    NonFinite(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of {len} positions exceeds maximum length {max}")]
    OverLength { len: usize, max: usize },
    #[error(transparent)]
    Graph(#[from] AutodiffError),
}

/// The `V x d` static embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self, LmError> {
        if data.len() != rows * dim {
            return Err(LmError::Dimension(format!(
                "embedding table of {rows}x{dim} needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LmError::NonFinite("embeddings".into()));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.dim, self.data.clone()).expect("validated shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmMode {
    /// Contextual output equals the static input.
    Identity,
    Transformer,
}

/// Shape of a transformer-mode encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmShape {
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for LmShape {
    fn default() -> Self {
        Self { layers: 1, heads: 2, ff_dim: 64, max_len: 64 }
    }
}

/// Tensor names and shapes of one post-norm encoder layer, in storage order.
fn layer_specs(i: usize, d: usize, ff: usize) -> Vec<(String, Vec<usize>)> {
    let p = format!("layers.{i}");
    let mut out = layers::attention_specs(&format!("{p}.attn"), d);
    out.extend(layers::norm_specs(&format!("{p}.ln1"), d));
    out.extend(layers::feed_forward_specs(&format!("{p}.ffn"), d, ff));
    out.extend(layers::norm_specs(&format!("{p}.ln2"), d));
    out
}

/// Frozen scoring encoder. Parameters cannot be modified after construction.
#[derive(Debug, Clone)]
pub struct LmEncoder {
    vocab: Vocabulary,
    embeddings: EmbeddingTable,
    mode: LmMode,
    max_len: usize,
    heads: usize,
    ff_dim: usize,
    positions: Option<Tensor>,
    layers: Vec<Vec<Tensor>>,
}

impl LmEncoder {
    /// Encoder whose contextual embeddings are its static embeddings.
    pub fn identity(vocab: Vocabulary, embeddings: EmbeddingTable, max_len: usize) -> Result<Self, LmError> {
        check_vocab_rows(&vocab, &embeddings)?;
        Ok(Self { vocab, embeddings, mode: LmMode::Identity, max_len, heads: 0, ff_dim: 0, positions: None, layers: Vec::new() })
    }

    /// Transformer-mode encoder with seeded random layer weights and
    /// sinusoidal positions.
    pub fn random_transformer(
        vocab: Vocabulary,
        embeddings: EmbeddingTable,
        shape: LmShape,
        seed: u64,
    ) -> Result<Self, LmError> {
        let d = embeddings.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let layers = (0..shape.layers)
            .map(|i| {
                layer_specs(i, d, shape.ff_dim)
                    .into_iter()
                    .map(|(name, s)| {
                        let n: usize = s.iter().product();
                        let data = if name.ends_with(".gamma") {
                            vec![1.0; n]
                        } else if name.ends_with(".beta") || s.len() == 1 {
                            vec![0.0; n]
                        } else {
                            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                        };
                        Tensor::new(s, data).expect("spec shape")
                    })
                    .collect()
            })
            .collect();
        let positions = layers::sinusoidal_positions(shape.max_len, d);
        Self::transformer(vocab, embeddings, shape, positions, layers)
    }

    /// Transformer-mode encoder from explicit weights, validated against the
    /// expected tensor layout.
    pub fn transformer(
        vocab: Vocabulary,
        embeddings: EmbeddingTable,
        shape: LmShape,
        positions: Tensor,
        layers: Vec<Vec<Tensor>>,
    ) -> Result<Self, LmError> {
        check_vocab_rows(&vocab, &embeddings)?;
        let d = embeddings.dim();
        if shape.heads == 0 || !d.is_multiple_of(shape.heads) {
            return Err(LmError::Dimension(format!("width {d} not divisible into {} heads", shape.heads)));
        }
        if positions.shape() != [shape.max_len, d] {
            return Err(LmError::Dimension(format!(
                "positions have shape {:?}, expected [{}, {}]",
                positions.shape(),
                shape.max_len,
                d
            )));
        }
        if layers.len() != shape.layers {
            return Err(LmError::Dimension(format!("{} layers given, {} declared", layers.len(), shape.layers)));
        }
        for (i, layer) in layers.iter().enumerate() {
            let specs = layer_specs(i, d, shape.ff_dim);
            if layer.len() != specs.len() {
                return Err(LmError::Dimension(format!("layer {i} has {} tensors, expected {}", layer.len(), specs.len())));
            }
            for (t, (name, s)) in layer.iter().zip(&specs) {
                if t.shape() != s.as_slice() {
                    return Err(LmError::Dimension(format!("{name} has shape {:?}, expected {:?}", t.shape(), s)));
                }
                if !t.is_finite() {
                    return Err(LmError::NonFinite(name.clone()));
                }
            }
        }
        if !positions.is_finite() {
            return Err(LmError::NonFinite("positions".into()));
        }
        Ok(Self {
            vocab,
            embeddings,
            mode: LmMode::Transformer,
            max_len: shape.max_len,
            heads: shape.heads,
            ff_dim: shape.ff_dim,
            positions: Some(positions),
            layers,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    pub fn mode(&self) -> LmMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn shape(&self) -> LmShape {
        LmShape { layers: self.layers.len(), heads: self.heads, ff_dim: self.ff_dim, max_len: self.max_len }
    }

    /// Static embedding rows for `ids`, as an `[n, d]` matrix.
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Tensor, LmError> {
        let v = self.embeddings.rows();
        let mut data = Vec::with_capacity(ids.len() * self.dim());
        for &id in ids {
            if id >= v {
                return Err(LmError::TokenOutOfRange { id, vocab: v });
            }
            data.extend_from_slice(self.embeddings.row(id));
        }
        Ok(Tensor::matrix(ids.len(), self.dim(), data)?)
    }

    /// Contextual embeddings of an `[n, d]` sequence already on `g`.
    ///
    /// Hard (looked-up) and soft (expected) embeddings take this same path.
    /// Parameters enter the graph as constants, so only the input can
    /// receive a gradient.
    pub fn contextualize(&self, g: &mut Graph, input: Var) -> Result<Var, LmError> {
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(LmError::Dimension(format!("input of shape {:?} for width {}", shape, self.dim())));
        }
        let n = shape[0];
        if n > self.max_len {
            return Err(LmError::OverLength { len: n, max: self.max_len });
        }
        match self.mode {
            LmMode::Identity => Ok(input),
            LmMode::Transformer => {
                let positions = self.positions.as_ref().expect("transformer mode has positions");
                let pos = layers::position_rows(g, positions, n)?;
                let mut h = g.add(input, pos)?;
                for layer in &self.layers {
                    let vars: Vec<Var> = layer.iter().map(|t| g.constant(t.clone())).collect();
                    let att = AttentionVars::from_slice(&vars[0..8]);
                    let ln1 = NormVars::from_slice(&vars[8..10]);
                    let ffn = FeedForwardVars::from_slice(&vars[10..14]);
                    let ln2 = NormVars::from_slice(&vars[14..16]);
                    let a = layers::multi_head_attention(g, h, h, &att, self.heads, false)?;
                    let r = g.add(h, a)?;
                    h = layers::layer_norm(g, r, &ln1)?;
                    let f = layers::feed_forward(g, h, &ffn)?;
                    let r = g.add(h, f)?;
                    h = layers::layer_norm(g, r, &ln2)?;
                }
                Ok(h)
            }
        }
    }

    /// Value-only form of [`LmEncoder::contextualize`].
    pub fn contextualize_values(&self, input: &Tensor) -> Result<Tensor, LmError> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = self.contextualize(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Every parameter value in storage order.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out = vec![self.embeddings.data()];
        if let Some(p) = &self.positions {
            out.push(p.data());
        }
        for layer in &self.layers {
            out.extend(layer.iter().map(Tensor::data));
        }
        out
    }

    /// Byte image of every parameter at full precision.
    pub fn parameter_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.parameters() {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of [`LmEncoder::parameter_bytes`].
    pub fn parameter_fingerprint(&self) -> String {
        binfmt::sha256_hex(&self.parameter_bytes())
    }
}

fn check_vocab_rows(vocab: &Vocabulary, table: &EmbeddingTable) -> Result<(), LmError> {
    if vocab.len() != table.rows() {
        return Err(LmError::Dimension(format!(
            "vocabulary has {} tokens but embedding table has {} rows",
            vocab.len(),
            table.rows()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn toy(v: usize, d: usize, seed: u64) -> (Vocabulary, EmbeddingTable) {
        let vocab = Vocabulary::with_sentinels((0..v - 4).map(|i| format!("w{i}"))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..v * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        (vocab, EmbeddingTable::new(v, d, data).unwrap())
    }

    #[test]
    fn embed_tokens_is_row_lookup() {
        let (vocab, table) = toy(10, 4, 0);
        let lm = LmEncoder::identity(vocab, table.clone(), 16).unwrap();
        assert_eq!(lm.embed_tokens(&[7]).unwrap().row(0), table.row(7));
        assert_eq!(lm.embed_tokens(&[]).unwrap().rows(), 0);
        let twice = lm.embed_tokens(&[3, 3]).unwrap();
        assert_eq!(twice.row(0), twice.row(1));
        assert!(matches!(lm.embed_tokens(&[10]), Err(LmError::TokenOutOfRange { id: 10, vocab: 10 })));
    }

    #[test]
    fn identity_mode_is_identity() {
        let (vocab, table) = toy(10, 4, 1);
        let lm = LmEncoder::identity(vocab, table, 16).unwrap();
        let x = lm.embed_tokens(&[4, 5, 6]).unwrap();
        assert_eq!(lm.contextualize_values(&x).unwrap(), x);
    }

    #[test]
    fn mismatched_rows_rejected() {
        let (vocab, _) = toy(10, 4, 1);
        let table = EmbeddingTable::new(9, 4, vec![0.0; 36]).unwrap();
        assert!(matches!(LmEncoder::identity(vocab, table, 8), Err(LmError::Dimension(_))));
    }

    #[test]
    fn transformer_is_position_sensitive() {
        let (vocab, table) = toy(12, 8, 2);
        let lm = LmEncoder::random_transformer(vocab, table, LmShape { layers: 1, heads: 2, ff_dim: 16, max_len: 8 }, 5)
            .unwrap();
        let ab = lm.contextualize_values(&lm.embed_tokens(&[4, 5]).unwrap()).unwrap();
        let ba = lm.contextualize_values(&lm.embed_tokens(&[5, 4]).unwrap()).unwrap();
        // a swap without position information would just swap the rows
        assert_ne!(ab.row(0), ba.row(1));
        assert_ne!(ab.row(1), ba.row(0));
    }

    #[test]
    fn over_length_rejected() {
        let (vocab, table) = toy(10, 4, 3);
        let lm = LmEncoder::identity(vocab, table, 2).unwrap();
        let x = lm.embed_tokens(&[4, 5, 6]).unwrap();
        assert!(matches!(lm.contextualize_values(&x), Err(LmError::OverLength { len: 3, max: 2 })));
    }

    #[test]
    fn transformer_input_gradient_matches_finite_differences() {
        let (vocab, table) = toy(12, 8, 4);
        let lm = LmEncoder::random_transformer(vocab, table, LmShape { layers: 2, heads: 2, ff_dim: 16, max_len: 8 }, 9)
            .unwrap();
        let x = lm.embed_tokens(&[4, 9, 6]).unwrap();
        let report = grad_check(
            |g, xv| {
                let y = lm.contextualize(g, xv).map_err(|e| match e {
                    LmError::Graph(a) => a,
                    other => panic!("{other}"),
                })?;
                let w = g.exp(y);
                g.mean(w)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn fingerprint_is_deterministic() {
        let (vocab, table) = toy(12, 8, 4);
        let a = LmEncoder::random_transformer(vocab.clone(), table.clone(), LmShape::default(), 1).unwrap();
        let b = LmEncoder::random_transformer(vocab, table, LmShape::default(), 1).unwrap();
        assert_eq!(a.parameter_fingerprint(), b.parameter_fingerprint());
    }
}
