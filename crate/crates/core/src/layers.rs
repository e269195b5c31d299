//! Transformer building blocks shared by the translation model and the
//! frozen scoring encoder. Blocks work on graph variables, so the same code
//! serves trainable parameters and frozen constants.

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

/// Additive mask value for disallowed attention positions.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Names and shapes of one attention sublayer's tensors, in storage order.
pub fn attention_specs(prefix: &str, d: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::with_capacity(8);
    for p in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.w{p}"), vec![d, d]));
        out.push((format!("{prefix}.b{p}"), vec![d]));
    }
    out
}

pub fn feed_forward_specs(prefix: &str, d: usize, ff: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.w1"), vec![d, ff]),
        (format!("{prefix}.b1"), vec![ff]),
        (format!("{prefix}.w2"), vec![ff, d]),
        (format!("{prefix}.b2"), vec![d]),
    ]
}

pub fn norm_specs(prefix: &str, d: usize) -> Vec<(String, Vec<usize>)> {
    vec![(format!("{prefix}.gamma"), vec![d]), (format!("{prefix}.beta"), vec![d])]
}

impl AttentionVars {
    /// Builds from eight consecutive vars laid out as in [`attention_specs`].
    pub fn from_slice(v: &[Var]) -> Self {
        Self { wq: v[0], bq: v[1], wk: v[2], bk: v[3], wv: v[4], bv: v[5], wo: v[6], bo: v[7] }
    }
}

impl FeedForwardVars {
    pub fn from_slice(v: &[Var]) -> Self {
        Self { w1: v[0], b1: v[1], w2: v[2], b2: v[3] }
    }
}

impl NormVars {
    pub fn from_slice(v: &[Var]) -> Self {
        Self { gamma: v[0], beta: v[1] }
    }
}

pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let h = g.matmul(x, w)?;
    g.add_row_broadcast(h, b)
}

pub fn layer_norm(g: &mut Graph, x: Var, n: &NormVars) -> Result<Var, AutodiffError> {
    g.layer_norm(x, n.gamma, n.beta)
}

pub fn feed_forward(g: &mut Graph, x: Var, ff: &FeedForwardVars) -> Result<Var, AutodiffError> {
    let h = linear(g, x, ff.w1, ff.b1)?;
    let h = g.relu(h);
    linear(g, h, ff.w2, ff.b2)
}

/// Scaled dot-product attention of `query_in` over `memory`, split into
/// `heads` column blocks. With `causal`, query row `i` only sees memory rows
/// `0..=i`.
pub fn multi_head_attention(
    g: &mut Graph,
    query_in: Var,
    memory: Var,
    att: &AttentionVars,
    heads: usize,
    causal: bool,
) -> Result<Var, AutodiffError> {
    let d = g.value(query_in).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(AutodiffError::InvalidArgument {
            op: "multi_head_attention",
            detail: format!("width {d} not divisible into {heads} heads"),
        });
    }
    let head_dim = d / heads;
    let q = linear(g, query_in, att.wq, att.bq)?;
    let k = linear(g, memory, att.wk, att.bk)?;
    let v = linear(g, memory, att.wv, att.bv)?;
    let (tq, tk) = (g.value(q).rows(), g.value(k).rows());
    let mask = if causal {
        let mut m = vec![0.0; tq * tk];
        for i in 0..tq {
            for j in (i + 1)..tk {
                m[i * tk + j] = MASKED;
            }
        }
        Some(g.constant(Tensor::matrix(tq, tk, m)?))
    } else {
        None
    };
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let scores = g.matmul_nt(qh, kh)?;
        let mut scores = g.scale(scores, scale);
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let weights = g.softmax(scores);
        outs.push(g.matmul(weights, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, joined, att.wo, att.bo)
}

/// Fixed sine/cosine position table of shape `[max_len, d]`.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(max_len, d, data).expect("consistent shape")
}

/// First `len` rows of a position table as a constant.
pub fn position_rows(g: &mut Graph, table: &Tensor, len: usize) -> Result<Var, AutodiffError> {
    let d = table.cols();
    if len > table.rows() {
        return Err(AutodiffError::InvalidArgument {
            op: "position_rows",
            detail: format!("length {len} exceeds {} positions", table.rows()),
        });
    }
    Ok(g.constant(Tensor::matrix(len, d, table.data()[..len * d].to_vec())?))
}
