//! Pre-norm transformer encoder-decoder whose target side shares the
//! scoring encoder's vocabulary.

mod decode;
mod params;

pub use decode::{normalized_score, beam_decode, greedy_decode, greedy_trace, Hypothesis, ModelScorer, StepScorer};
pub use params::ParamSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::layers::{self, AttentionVars, FeedForwardVars, NormVars};
use crate::lm::{LmEncoder, Vocabulary};
use crate::softpred::{softmax_kernel, SoftDistribution};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("reference must start with <bos>")]
    MissingBos,
    #[error("sequence of {len} tokens exceeds maximum length {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error("length penalty must be non-negative, got {0}")]
    NegativeLengthPenalty(f64),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder_layers: 2, decoder_layers: 2, d_model: 32, heads: 2, ff_dim: 64, max_len: 64 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.heads == 0 || self.ff_dim == 0 || self.max_len < 2 {
            return Err(ModelError::Config(format!("dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }
}

/// Generation budget for a source of `source_len` tokens, bounded by the
/// model's position table.
pub fn decode_limit(source_len: usize, max_len: usize) -> usize {
    (2 * source_len + 10).min(max_len)
}

const ENC_LAYER_TENSORS: usize = 2 + 8 + 2 + 4;
const DEC_LAYER_TENSORS: usize = 2 + 8 + 2 + 8 + 2 + 4;

/// Names and shapes of every parameter, in storage order.
pub fn parameter_specs(config: &ModelConfig, src_vocab: usize, tgt_vocab: usize) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = vec![("src_embed".to_string(), vec![src_vocab, d]), ("tgt_embed".to_string(), vec![tgt_vocab, d])];
    for i in 0..config.encoder_layers {
        let p = format!("enc.{i}");
        out.extend(layers::norm_specs(&format!("{p}.ln1"), d));
        out.extend(layers::attention_specs(&format!("{p}.self_attn"), d));
        out.extend(layers::norm_specs(&format!("{p}.ln2"), d));
        out.extend(layers::feed_forward_specs(&format!("{p}.ffn"), d, config.ff_dim));
    }
    out.extend(layers::norm_specs("enc.final_ln", d));
    for i in 0..config.decoder_layers {
        let p = format!("dec.{i}");
        out.extend(layers::norm_specs(&format!("{p}.ln1"), d));
        out.extend(layers::attention_specs(&format!("{p}.self_attn"), d));
        out.extend(layers::norm_specs(&format!("{p}.ln2"), d));
        out.extend(layers::attention_specs(&format!("{p}.cross_attn"), d));
        out.extend(layers::norm_specs(&format!("{p}.ln3"), d));
        out.extend(layers::feed_forward_specs(&format!("{p}.ffn"), d, config.ff_dim));
    }
    out.extend(layers::norm_specs("dec.final_ln", d));
    out.push(("out.w".into(), vec![d, tgt_vocab]));
    out.push(("out.b".into(), vec![tgt_vocab]));
    out
}

/// Translation model. The output projection's width is the target
/// vocabulary size, which must equal the scoring encoder's row count.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    params: ParamSet,
}

impl Seq2SeqModel {
    /// Seeded initialisation: matrices and embeddings uniform in
    /// `±1/sqrt(d_model)`, biases zero, norm gains one.
    pub fn init(config: ModelConfig, src_vocab: Vocabulary, tgt_vocab: Vocabulary, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.d_model as f64).sqrt();
        let entries = parameter_specs(&config, src_vocab.len(), tgt_vocab.len())
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".gamma") {
                    vec![1.0; n]
                } else if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                (name, Tensor::new(shape, data).expect("spec shape"))
            })
            .collect();
        Ok(Self { config, src_vocab, tgt_vocab, params: ParamSet::new(entries) })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(
        config: ModelConfig,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        params: ParamSet,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = parameter_specs(&config, src_vocab.len(), tgt_vocab.len());
        if specs.len() != params.len() {
            return Err(ModelError::Config(format!("{} parameter tensors, expected {}", params.len(), specs.len())));
        }
        for ((name, shape), (pname, t)) in specs.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {pname} {:?} where {name} {:?} was expected",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(Self { config, src_vocab, tgt_vocab, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn src_vocab(&self) -> &Vocabulary {
        &self.src_vocab
    }

    pub fn tgt_vocab(&self) -> &Vocabulary {
        &self.tgt_vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_values()
    }

    /// Rejects pairing with a scoring encoder whose vocabulary differs.
    pub fn check_shared_vocab(&self, lm: &LmEncoder) -> Result<(), ModelError> {
        if self.tgt_vocab.len() != lm.embeddings().rows() {
            return Err(ModelError::VocabMismatch(format!(
                "model emits {} classes, encoder has {} embedding rows",
                self.tgt_vocab.len(),
                lm.embeddings().rows()
            )));
        }
        if &self.tgt_vocab != lm.vocab() {
            return Err(ModelError::VocabMismatch("target vocabulary differs from the encoder's".into()));
        }
        Ok(())
    }

    /// Places every parameter on `g`, as variables when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel<'_> {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| if trainable { g.variable(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        BoundModel { model: self, vars }
    }

    /// Wraps vars already on a graph, one per parameter in storage order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundModel<'_>, ModelError> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Config(format!("{} vars for {} parameters", vars.len(), self.params.len())));
        }
        Ok(BoundModel { model: self, vars })
    }

    /// Source ids with a trailing `<eos>`.
    pub fn source_ids(&self, source: &[usize]) -> Vec<usize> {
        let mut ids = source.to_vec();
        ids.push(self.src_vocab.eos());
        ids
    }

    /// Next-token distributions under teacher forcing.
    ///
    /// `reference` starts with `<bos>`; row `j` is conditioned on
    /// `reference[..=j]` and predicts `reference[j + 1]`, so there are
    /// `reference.len() - 1` rows.
    pub fn teacher_forced_probs(&self, source: &[usize], reference: &[usize]) -> Result<Vec<SoftDistribution>, ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let logits = bound.teacher_forced_logits(&mut g, source, reference)?;
        let t = g.value(logits);
        (0..t.rows())
            .map(|i| {
                SoftDistribution::new(softmax_kernel(t.row(i)))
                    .map_err(|e| ModelError::Config(format!("decoder produced an invalid distribution: {e}")))
            })
            .collect()
    }

    pub fn greedy_decode(&self, source: &[usize], max_len: usize) -> Result<Vec<usize>, ModelError> {
        let mut scorer = ModelScorer::new(self, source)?;
        greedy_decode(&mut scorer, max_len)
    }

    pub fn beam_decode(&self, source: &[usize], beam_size: usize, alpha: f64, max_len: usize) -> Result<Hypothesis, ModelError> {
        let mut scorer = ModelScorer::new(self, source)?;
        beam_decode(&mut scorer, beam_size, alpha, max_len)
    }
}

/// Model parameters bound to a graph.
pub struct BoundModel<'m> {
    model: &'m Seq2SeqModel,
    vars: Vec<Var>,
}

impl<'m> BoundModel<'m> {
    /// Parameter vars in storage order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn embed(&self, g: &mut Graph, table: Var, ids: &[usize], vocab: usize) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        if ids.len() > cfg.max_len {
            return Err(ModelError::TooLong { len: ids.len(), max: cfg.max_len });
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= vocab) {
            return Err(ModelError::TokenOutOfRange { id, vocab });
        }
        let e = g.gather_rows(table, ids)?;
        let e = g.scale(e, (cfg.d_model as f64).sqrt());
        let positions = layers::sinusoidal_positions(ids.len(), cfg.d_model);
        let pos = g.constant(positions);
        Ok(g.add(e, pos)?)
    }

    /// Encoder memory for raw source ids (`<eos>` is appended here).
    pub fn encode(&self, g: &mut Graph, source: &[usize]) -> Result<Var, ModelError> {
        let cfg = self.model.config;
        let ids = self.model.source_ids(source);
        let mut x = self.embed(g, self.vars[0], &ids, self.model.src_vocab.len())?;
        let mut at = 2;
        for _ in 0..cfg.encoder_layers {
            let v = &self.vars[at..at + ENC_LAYER_TENSORS];
            let ln1 = NormVars::from_slice(&v[0..2]);
            let att = AttentionVars::from_slice(&v[2..10]);
            let ln2 = NormVars::from_slice(&v[10..12]);
            let ffn = FeedForwardVars::from_slice(&v[12..16]);
            let h = layers::layer_norm(g, x, &ln1)?;
            let a = layers::multi_head_attention(g, h, h, &att, cfg.heads, false)?;
            x = g.add(x, a)?;
            let h = layers::layer_norm(g, x, &ln2)?;
            let f = layers::feed_forward(g, h, &ffn)?;
            x = g.add(x, f)?;
            at += ENC_LAYER_TENSORS;
        }
        let fin = NormVars::from_slice(&self.vars[at..at + 2]);
        Ok(layers::layer_norm(g, x, &fin)?)
    }

    /// Logits for every position of a target prefix, `[prefix.len(), V]`.
    pub fn decoder_logits(&self, g: &mut Graph, memory: Var, prefix: &[usize]) -> Result<Var, ModelError> {
        let cfg = self.model.config;
        let mut y = self.embed(g, self.vars[1], prefix, self.model.tgt_vocab.len())?;
        let mut at = 2 + cfg.encoder_layers * ENC_LAYER_TENSORS + 2;
        for _ in 0..cfg.decoder_layers {
            let v = &self.vars[at..at + DEC_LAYER_TENSORS];
            let ln1 = NormVars::from_slice(&v[0..2]);
            let self_att = AttentionVars::from_slice(&v[2..10]);
            let ln2 = NormVars::from_slice(&v[10..12]);
            let cross_att = AttentionVars::from_slice(&v[12..20]);
            let ln3 = NormVars::from_slice(&v[20..22]);
            let ffn = FeedForwardVars::from_slice(&v[22..26]);
            let h = layers::layer_norm(g, y, &ln1)?;
            let a = layers::multi_head_attention(g, h, h, &self_att, cfg.heads, true)?;
            y = g.add(y, a)?;
            let h = layers::layer_norm(g, y, &ln2)?;
            let c = layers::multi_head_attention(g, h, memory, &cross_att, cfg.heads, false)?;
            y = g.add(y, c)?;
            let h = layers::layer_norm(g, y, &ln3)?;
            let f = layers::feed_forward(g, h, &ffn)?;
            y = g.add(y, f)?;
            at += DEC_LAYER_TENSORS;
        }
        let fin = NormVars::from_slice(&self.vars[at..at + 2]);
        let y = layers::layer_norm(g, y, &fin)?;
        let (w, b) = (self.vars[at + 2], self.vars[at + 3]);
        Ok(layers::linear(g, y, w, b)?)
    }

    /// Teacher-forced logits, `[reference.len() - 1, V]`.
    pub fn teacher_forced_logits(&self, g: &mut Graph, source: &[usize], reference: &[usize]) -> Result<Var, ModelError> {
        if reference.first() != Some(&self.model.tgt_vocab.bos()) {
            return Err(ModelError::MissingBos);
        }
        if reference.len() < 2 {
            return Err(ModelError::Config("reference needs at least one token after <bos>".into()));
        }
        let memory = self.encode(g, source)?;
        self.decoder_logits(g, memory, &reference[..reference.len() - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocabs(src: usize, tgt: usize) -> (Vocabulary, Vocabulary) {
        (
            Vocabulary::with_sentinels((0..src).map(|i| format!("s{i}"))).unwrap(),
            Vocabulary::with_sentinels((0..tgt).map(|i| format!("t{i}"))).unwrap(),
        )
    }

    fn small() -> ModelConfig {
        ModelConfig { encoder_layers: 1, decoder_layers: 1, d_model: 8, heads: 2, ff_dim: 16, max_len: 16 }
    }

    #[test]
    fn same_seed_same_parameters() {
        let (s, t) = vocabs(5, 6);
        let a = Seq2SeqModel::init(small(), s.clone(), t.clone(), 3).unwrap();
        let b = Seq2SeqModel::init(small(), s.clone(), t.clone(), 3).unwrap();
        let c = Seq2SeqModel::init(small(), s, t, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn output_projection_shape() {
        let (s, t) = vocabs(10, 46);
        let m = Seq2SeqModel::init(ModelConfig::default(), s, t, 0).unwrap();
        assert_eq!(m.params().get("out.w").unwrap().shape(), &[32, 50]);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let (s, t) = vocabs(20, 60);
        let cfg = ModelConfig::default();
        let m = Seq2SeqModel::init(cfg, s, t, 0).unwrap();
        let (d, ff, vs, vt) = (32usize, 64usize, 24usize, 64usize);
        let attn = 4 * d * d + 4 * d;
        let ffn = 2 * d * ff + ff + d;
        let ln = 2 * d;
        let enc = attn + ffn + 2 * ln;
        let dec = 2 * attn + ffn + 3 * ln;
        let expected = vs * d + vt * d + 2 * enc + ln + 2 * dec + ln + d * vt + vt;
        assert_eq!(m.parameter_count(), expected);
    }

    #[test]
    fn rejects_bad_config() {
        let (s, t) = vocabs(2, 2);
        let mut cfg = small();
        cfg.d_model = 0;
        assert!(Seq2SeqModel::init(cfg, s.clone(), t.clone(), 0).is_err());
        let mut cfg = small();
        cfg.heads = 3;
        assert!(Seq2SeqModel::init(cfg, s, t, 0).is_err());
    }

    #[test]
    fn teacher_forcing_rows_are_distributions_and_causal() {
        let (s, t) = vocabs(5, 6);
        let m = Seq2SeqModel::init(small(), s, t, 1).unwrap();
        let bos = m.tgt_vocab().bos();
        let reference = vec![bos, 4, 5, 6, 2];
        let rows = m.teacher_forced_probs(&[4, 5], &reference).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert!((r.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mut mutated = reference.clone();
        mutated[3] = 8;
        let rows2 = m.teacher_forced_probs(&[4, 5], &mutated).unwrap();
        for j in 0..3 {
            assert_eq!(rows[j], rows2[j], "row {j} changed");
        }
        assert_ne!(rows[3], rows2[3]);
        assert!(matches!(m.teacher_forced_probs(&[4], &[4, 5]), Err(ModelError::MissingBos)));
    }

    #[test]
    fn untrained_rows_are_near_uniform() {
        let (s, t) = vocabs(20, 46);
        let m = Seq2SeqModel::init(ModelConfig::default(), s, t, 0).unwrap();
        let bos = m.tgt_vocab().bos();
        let rows = m.teacher_forced_probs(&[4, 9, 11, 5], &[bos, 7, 30, 12, 2]).unwrap();
        let v = 50.0;
        for r in rows {
            let max = r.probs().iter().cloned().fold(0.0, f64::max);
            assert!(max < 10.0 / v, "max prob {max}");
        }
    }

    #[test]
    fn vocab_sharing_is_checked() {
        use crate::lm::EmbeddingTable;
        let (s, t) = vocabs(3, 4);
        let m = Seq2SeqModel::init(small(), s, t.clone(), 0).unwrap();
        let ok = LmEncoder::identity(t, EmbeddingTable::new(8, 2, vec![0.5; 16]).unwrap(), 8).unwrap();
        assert!(m.check_shared_vocab(&ok).is_ok());
        let other = Vocabulary::with_sentinels((0..5).map(|i| format!("t{i}"))).unwrap();
        let bad = LmEncoder::identity(other, EmbeddingTable::new(9, 2, vec![0.5; 18]).unwrap(), 8).unwrap();
        assert!(matches!(m.check_shared_vocab(&bad), Err(ModelError::VocabMismatch(_))));
    }
}
