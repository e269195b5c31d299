#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Fine-tuning small translation models against a differentiable
//! BERTScore-style objective.
//!
//! The decoder's per-position distributions are turned into soft
//! predictions (dense softmax, sparsemax or Gumbel-Softmax), averaged into
//! expected embeddings of a frozen language model, and scored against the
//! reference by greedy cosine alignment. The negated F score is minimised
//! with Adam while the language model stays fixed.

pub mod autodiff;
pub mod bertscore;
pub mod corpus;
pub mod eval;
pub(crate) mod binfmt;
pub mod layers;
pub mod lm;
pub mod nmt;
pub mod softpred;
pub mod training;
