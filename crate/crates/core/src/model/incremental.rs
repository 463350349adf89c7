//! Token-at-a-time decoding with cached keys and values.
//!
//! This path uses plain slice arithmetic instead of the tape, so it doubles
//! as an independent check on the batched forward pass.

use super::params::{AttnIdx, LinearIdx, NormIdx};
use super::Model;
use crate::error::{Error, Result};
use crate::tensor::{gemm, layer_norm_row, softmax_in_place, Scalar, Tensor};

/// Encoder output plus each decoder layer's cross-attention keys and values.
pub struct EncodedSource<F> {
    pub memory: Tensor<F>,
    cross: Vec<(Vec<F>, Vec<F>)>,
}

impl<F: Scalar> EncodedSource<F> {
    pub fn len(&self) -> usize {
        self.memory.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoder state after a prefix: per-layer self-attention key/value rows.
#[derive(Clone)]
pub struct IncrementalDecoder<'a, F: Scalar> {
    model: &'a Model<F>,
    source: &'a EncodedSource<F>,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
}

fn affine<F: Scalar>(model: &Model<F>, idx: &LinearIdx, x: &[F], rows: usize) -> Vec<F> {
    let w = model.params.at(idx.w);
    let b = model.params.at(idx.b).data();
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out: Vec<F> = b.iter().copied().cycle().take(rows * n).collect();
    gemm(rows, k, n, x, (k, 1), w.data(), (n, 1), F::one(), &mut out);
    out
}

fn norm<F: Scalar>(model: &Model<F>, idx: &NormIdx, x: &[F]) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    layer_norm_row(
        x,
        model.params.at(idx.g).data(),
        model.params.at(idx.b).data(),
        &mut out,
    );
    out
}

/// One query row against `n` cached key/value rows.
fn attend<F: Scalar>(model: &Model<F>, q: &[F], keys: &[F], values: &[F]) -> Vec<F> {
    let d = model.config.d_model;
    let dh = model.config.head_dim();
    let n = keys.len() / d;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![F::zero(); d];
    let mut scores = vec![F::zero(); n];
    for h in 0..model.config.n_heads {
        let cols = h * dh..(h + 1) * dh;
        for (j, s) in scores.iter_mut().enumerate() {
            let krow = &keys[j * d..(j + 1) * d];
            *s = q[cols.clone()]
                .iter()
                .zip(&krow[cols.clone()])
                .map(|(&a, &b)| a * b)
                .sum::<F>()
                * scale;
        }
        softmax_in_place(&mut scores);
        for (j, &p) in scores.iter().enumerate() {
            let vrow = &values[j * d..(j + 1) * d];
            for c in cols.clone() {
                out[c] = out[c] + p * vrow[c];
            }
        }
    }
    out
}

fn add_into<F: Scalar>(x: &mut [F], y: &[F]) {
    x.iter_mut().zip(y).for_each(|(a, &b)| *a = *a + b);
}

impl<F: Scalar> Model<F> {
    /// Runs the encoder and precomputes cross-attention keys/values.
    pub fn encode_source(&self, source: &[usize]) -> Result<EncodedSource<F>> {
        let memory = self.encode(source)?;
        let n = memory.rows();
        let cross = self
            .layout
            .dec
            .iter()
            .map(|l| {
                (
                    affine(self, &l.cross_attn.k, memory.data(), n),
                    affine(self, &l.cross_attn.v, memory.data(), n),
                )
            })
            .collect();
        Ok(EncodedSource { memory, cross })
    }
}

impl<'a, F: Scalar> IncrementalDecoder<'a, F> {
    pub fn new(model: &'a Model<F>, source: &'a EncodedSource<F>) -> Self {
        let layers = model.layout.dec.len();
        Self {
            model,
            source,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            len: 0,
        }
    }

    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn self_attention(&mut self, layer: usize, idx: &AttnIdx, h: &[F]) -> Vec<F> {
        let m = self.model;
        let q = affine(m, &idx.q, h, 1);
        self.keys[layer].extend(affine(m, &idx.k, h, 1));
        self.values[layer].extend(affine(m, &idx.v, h, 1));
        let a = attend(m, &q, &self.keys[layer], &self.values[layer]);
        affine(m, &idx.o, &a, 1)
    }

    /// Feeds one token and returns the logits for the next one.
    pub fn step(&mut self, token: usize, global: usize, local: usize) -> Result<Vec<F>> {
        let m = self.model;
        m.check_positions(&[token], &[global], &[local])?;
        if self.source.cross.len() != m.layout.dec.len() {
            return Err(Error::Usage(
                "encoded source was prepared by a different model".into(),
            ));
        }
        let d = m.config.d_model;
        let p = &m.params;
        let mut x: Vec<F> = p.at(m.layout.tok_emb).row(token).to_vec();
        add_into(&mut x, p.at(m.layout.global_pos).row(global));
        add_into(&mut x, p.at(m.layout.local_pos).row(local));
        for (li, layer) in m.layout.dec.iter().enumerate() {
            let h = norm(m, &layer.ln1, &x);
            let a = self.self_attention(li, &layer.self_attn, &h);
            add_into(&mut x, &a);

            let h = norm(m, &layer.ln2, &x);
            let q = affine(m, &layer.cross_attn.q, &h, 1);
            let (ck, cv) = &self.source.cross[li];
            let c = attend(m, &q, ck, cv);
            add_into(&mut x, &affine(m, &layer.cross_attn.o, &c, 1));

            let h = norm(m, &layer.ln3, &x);
            let mut f = affine(m, &layer.fc1, &h, 1);
            f.iter_mut().for_each(|v| *v = v.max(F::zero()));
            add_into(&mut x, &affine(m, &layer.fc2, &f, 1));
        }
        let h = norm(m, &m.layout.dec_ln, &x);
        let emb = p.at(m.layout.tok_emb);
        let vocab = emb.rows();
        let mut logits = p.at(m.layout.out_bias).data().to_vec();
        gemm(
            1,
            d,
            vocab,
            &h,
            (d, 1),
            emb.data(),
            (1, d),
            F::one(),
            &mut logits,
        );
        self.len += 1;
        Ok(logits)
    }
}
