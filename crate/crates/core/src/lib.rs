//! Sentence-permuted paragraph generation.
//!
//! An encoder-decoder transformer learns to write a paragraph's sentences in
//! any order. Each sentence is wrapped in `<B-t>`/`<E-t>` markers carrying its
//! index `t`, tokens carry hierarchical (sentence, within-sentence) positions,
//! and training samples one sentence order per example per step. Decoding
//! picks a first sentence index, then greedily chooses each next index at
//! sentence boundaries, and finally reorders the sentences by index.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense tensors with a define-by-run reverse-mode tape.
//! - [`corpus`]: tokenization, vocabulary and JSONL corpora.
//! - [`sequence`]: sentence orders and decoder sequences with positions.
//! - [`model`]: the encoder-decoder transformer.
//! - [`train`]: the permutation-sampled objective, optimizers, checkpoints.
//! - [`decode`]: the sentence-indexed decoding state machine and ranking.
//! - [`metrics`]: BLEU, Self-BLEU, Distinct-k and Entropy-k.
//! - [`toy`]: templated synthetic corpora used as hermetic fixtures.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod sequence;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
