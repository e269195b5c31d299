//! Soft replacements for the argmax over the vocabulary.
//!
//! Each operator maps a logit or probability vector to a point on the
//! probability simplex so that an expected embedding can be formed and
//! differentiated. The `*_kernel` functions are shared with the graph
//! primitives in [`crate::autodiff`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::EmbeddingTable;

/// Probabilities are clamped to this value before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Allowed deviation of a distribution's total mass from one.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;
/// Gumbel-Softmax temperature used for fine-tuning unless overridden.
pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SoftPredError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("non-finite entry {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("empty input vector")]
    Empty,
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A probability vector over the vocabulary together with its support.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftDistribution {
    probs: Vec<f64>,
    support: Vec<usize>,
}

impl SoftDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, SoftPredError> {
        if probs.is_empty() {
            return Err(SoftPredError::Empty);
        }
        if let Some((i, &p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
            return Err(SoftPredError::NotADistribution(format!("entry {i} is {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(SoftPredError::NotADistribution(format!("entries sum to {total}")));
        }
        let support = probs.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, _)| i).collect();
        Ok(Self { probs, support })
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self { probs, support: vec![index] }
    }

    pub fn uniform(len: usize) -> Self {
        Self { probs: vec![1.0 / len as f64; len], support: (0..len).collect() }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Indices of the strictly positive entries, ascending.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// How the decoder's distribution is turned into a soft prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum PredictionMode {
    /// Softmax output used as is.
    Dense,
    Sparsemax,
    GumbelSoftmax { tau: f64 },
}

impl PredictionMode {
    pub fn validate(&self) -> Result<(), SoftPredError> {
        match *self {
            PredictionMode::GumbelSoftmax { tau } if !(tau > 0.0) => Err(SoftPredError::NonPositiveTemperature(tau)),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PredictionMode::Dense => "dense",
            PredictionMode::Sparsemax => "sparsemax",
            PredictionMode::GumbelSoftmax { .. } => "gumbel",
        }
    }

    /// Parses `dense`, `sparsemax` or `gumbel`; `tau` applies to the latter.
    pub fn parse(name: &str, tau: f64) -> Result<Self, String> {
        let mode = match name {
            "dense" => PredictionMode::Dense,
            "sparsemax" => PredictionMode::Sparsemax,
            "gumbel" | "gumbel-softmax" => PredictionMode::GumbelSoftmax { tau },
            other => return Err(format!("unknown prediction mode `{other}`")),
        };
        mode.validate().map_err(|e| e.to_string())?;
        Ok(mode)
    }
}

impl FromStr for PredictionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s, DEFAULT_TAU)
    }
}

impl fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictionMode::GumbelSoftmax { tau } => write!(f, "gumbel(tau={tau})"),
            other => f.write_str(other.name()),
        }
    }
}

fn check_finite(values: &[f64]) -> Result<(), SoftPredError> {
    if values.is_empty() {
        return Err(SoftPredError::Empty);
    }
    match values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        Some((index, &value)) => Err(SoftPredError::NonFinite { index, value }),
        None => Ok(()),
    }
}

pub(crate) fn softmax_kernel(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Sort-based simplex projection. Logits are shifted by their maximum first,
/// which makes the result invariant to exactly representable shifts.
pub(crate) fn sparsemax_kernel(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = z.iter().map(|v| v - max).collect();
    let mut sorted = shifted.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite logits"));
    let mut cumsum = 0.0;
    let mut support_sum = sorted[0];
    let mut k = 1usize;
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let kk = (i + 1) as f64;
        if 1.0 + kk * v > cumsum {
            k = i + 1;
            support_sum = cumsum;
        }
    }
    let threshold = (support_sum - 1.0) / k as f64;
    shifted.iter().map(|v| (v - threshold).max(0.0)).collect()
}

pub(crate) fn gumbel_softmax_kernel(probs: &[f64], noise: &[f64], tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = probs.iter().zip(noise).map(|(p, g)| (p.max(PROB_FLOOR).ln() + g) / tau).collect();
    softmax_kernel(&logits)
}

/// `p_i ∝ exp(logit_i / temperature)`.
pub fn softmax_temperature(logits: &[f64], temperature: f64) -> Result<SoftDistribution, SoftPredError> {
    if !(temperature > 0.0) {
        return Err(SoftPredError::NonPositiveTemperature(temperature));
    }
    check_finite(logits)?;
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    SoftDistribution::new(softmax_kernel(&scaled))
}

/// Euclidean projection of `logits` onto the probability simplex.
pub fn sparsemax(logits: &[f64]) -> Result<SoftDistribution, SoftPredError> {
    check_finite(logits)?;
    SoftDistribution::new(sparsemax_kernel(logits))
}

/// Vector-Jacobian product of [`sparsemax`] at `output`.
pub fn sparsemax_backward(output: &SoftDistribution, upstream: &[f64]) -> Result<Vec<f64>, SoftPredError> {
    if upstream.len() != output.len() {
        return Err(SoftPredError::DimensionMismatch { expected: output.len(), got: upstream.len() });
    }
    let mut grad = vec![0.0; upstream.len()];
    crate::autodiff::sparsemax_backward_acc(&mut grad, output.probs(), upstream);
    Ok(grad)
}

/// Draws `n` independent standard Gumbel variates.
pub fn sample_gumbel_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit scale");
    (0..n).map(|_| gumbel.sample(rng)).collect()
}

/// Gumbel-Softmax relaxation of a sample from `probs` with explicit noise.
pub fn gumbel_softmax_with_noise(
    probs: &SoftDistribution,
    noise: &[f64],
    tau: f64,
) -> Result<SoftDistribution, SoftPredError> {
    if !(tau > 0.0) {
        return Err(SoftPredError::NonPositiveTemperature(tau));
    }
    if noise.len() != probs.len() {
        return Err(SoftPredError::DimensionMismatch { expected: probs.len(), got: noise.len() });
    }
    check_finite(noise)?;
    SoftDistribution::new(gumbel_softmax_kernel(probs.probs(), noise, tau))
}

/// Gumbel-Softmax relaxation with fresh noise drawn from `rng`.
pub fn gumbel_softmax<R: Rng + ?Sized>(
    probs: &SoftDistribution,
    tau: f64,
    rng: &mut R,
) -> Result<SoftDistribution, SoftPredError> {
    if !(tau > 0.0) {
        return Err(SoftPredError::NonPositiveTemperature(tau));
    }
    let noise = sample_gumbel_noise(rng, probs.len());
    gumbel_softmax_with_noise(probs, &noise, tau)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(dist: &SoftDistribution) -> f64 {
    entropy_of(dist.probs())
}

pub(crate) fn entropy_of(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Probability-weighted average of the embedding rows.
pub fn expected_embedding(dist: &SoftDistribution, table: &EmbeddingTable) -> Result<Vec<f64>, SoftPredError> {
    if dist.len() != table.rows() {
        return Err(SoftPredError::DimensionMismatch { expected: table.rows(), got: dist.len() });
    }
    let mut out = vec![0.0; table.dim()];
    for &i in dist.support() {
        let p = dist.probs()[i];
        for (o, e) in out.iter_mut().zip(table.row(i)) {
            *o += p * e;
        }
    }
    Ok(out)
}
