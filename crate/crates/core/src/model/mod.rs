//! Encoder-decoder transformer with hierarchical decoder positions.
//!
//! The decoder input at each position is the sum of a token embedding, a
//! sentence-index (global) embedding and a within-sentence (local)
//! embedding. The encoder uses ordinary absolute positions. Blocks are
//! pre-norm with ReLU feed-forward layers, and the output projection is tied
//! to the token embedding.

mod incremental;
mod params;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::{DEFAULT_LMAX, TMAX};
use crate::error::{Error, Result};
use crate::sequence::DecoderSequence;
use crate::tensor::{log_softmax_in_place, Scalar, Tape, Tensor, Var};

pub use incremental::{EncodedSource, IncrementalDecoder};
pub use params::ParamStore;
use params::{AttnIdx, Layout, LinearIdx, NormIdx};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub tmax: usize,
    pub lmax: usize,
    pub max_source_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            vocab_size: 0,
            tmax: TMAX,
            lmax: DEFAULT_LMAX,
            max_source_len: 512,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("lmax", self.lmax),
            ("max_source_len", self.max_source_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model {} is not divisible by model.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.tmax != TMAX {
            return Err(Error::Config(format!(
                "model.tmax must be {TMAX} to match the special-token registry"
            )));
        }
        if self.lmax < 3 {
            return Err(Error::Config("model.lmax must be at least 3".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Longest sentence body whose segment fits the local position table.
    pub fn max_sentence_body(&self) -> usize {
        self.lmax - 2
    }
}

/// Whether a forward pass applies dropout.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

pub struct Model<F: Scalar> {
    config: ModelConfig,
    params: ParamStore<F>,
    layout: Layout,
}

impl<F: Scalar> Clone for Model<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
        }
    }
}

/// Parameters registered on one tape, in [`ParamStore`] order.
pub struct Bound<'t, F: Scalar> {
    vars: Vec<Var<'t, F>>,
}

impl<'t, F: Scalar> Bound<'t, F> {
    pub fn vars(&self) -> &[Var<'t, F>] {
        &self.vars
    }

    fn get(&self, i: usize) -> Var<'t, F> {
        self.vars[i]
    }
}

impl<F: Scalar> Model<F> {
    /// Randomly initialized model.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (params, layout) = params::init(&config, rng)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let (template, layout) = params::build::<F>(&config, None)?;
        if template.len() != params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, got {}",
                template.len(),
                params.len()
            )));
        }
        for ((name, t), (got_name, got)) in template.iter().zip(params.iter()) {
            if name != got_name || t.shape() != got.shape() {
                return Err(Error::Validation(format!(
                    "parameter {got_name} {:?} does not match expected {name} {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> Bound<'t, F> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(_, t)| tape.param(t.clone()))
                .collect(),
        }
    }

    /// Registers parameters as constants (no gradient bookkeeping).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<F>) -> Bound<'t, F> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(_, t)| tape.constant(t.clone()))
                .collect(),
        }
    }

    fn check_source(&self, source: &[usize]) -> Result<()> {
        if source.is_empty() {
            return Err(Error::Validation("empty source".into()));
        }
        if source.len() > self.config.max_source_len {
            return Err(Error::Validation(format!(
                "source of {} tokens exceeds the maximum of {}",
                source.len(),
                self.config.max_source_len
            )));
        }
        if let Some(&id) = source.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "source token {id} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn check_positions(
        &self,
        tokens: &[usize],
        global: &[usize],
        local: &[usize],
    ) -> Result<()> {
        if tokens.len() != global.len() || tokens.len() != local.len() || tokens.is_empty() {
            return Err(Error::Dimension(format!(
                "decoder input lists differ in length: {} tokens, {} global, {} local",
                tokens.len(),
                global.len(),
                local.len()
            )));
        }
        for i in 0..tokens.len() {
            if tokens[i] >= self.config.vocab_size {
                return Err(Error::Index(format!(
                    "token {} at position {i} outside vocabulary of {}",
                    tokens[i], self.config.vocab_size
                )));
            }
            if global[i] > self.config.tmax + 1 {
                return Err(Error::Index(format!(
                    "global position {} at {i} outside table 0..={}",
                    global[i],
                    self.config.tmax + 1
                )));
            }
            if local[i] > self.config.lmax {
                return Err(Error::Index(format!(
                    "local position {} at {i} outside table 0..={}",
                    local[i], self.config.lmax
                )));
            }
        }
        Ok(())
    }

    fn dropout<'t>(&self, x: Var<'t, F>, mode: &mut Mode<'_>) -> Result<Var<'t, F>> {
        let rate = self.config.dropout;
        match mode {
            Mode::Train(rng) if rate > 0.0 => {
                let n = x.borrow_value().numel();
                let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= rate).collect();
                x.dropout(&keep, F::of(rate))
            }
            _ => Ok(x),
        }
    }

    fn linear<'t>(&self, b: &Bound<'t, F>, idx: &LinearIdx, x: Var<'t, F>) -> Result<Var<'t, F>> {
        x.matmul(b.get(idx.w))?.add_row(b.get(idx.b))
    }

    fn norm<'t>(&self, b: &Bound<'t, F>, idx: &NormIdx, x: Var<'t, F>) -> Result<Var<'t, F>> {
        x.layer_norm(b.get(idx.g), b.get(idx.b))
    }

    fn attention<'t>(
        &self,
        b: &Bound<'t, F>,
        idx: &AttnIdx,
        query_in: Var<'t, F>,
        kv_in: Var<'t, F>,
        causal: bool,
    ) -> Result<Var<'t, F>> {
        let dh = self.config.head_dim();
        let q = self.linear(b, &idx.q, query_in)?;
        let k = self.linear(b, &idx.k, kv_in)?;
        let v = self.linear(b, &idx.v, kv_in)?;
        let (lq, lk) = (q.borrow_value().rows(), k.borrow_value().rows());
        let mask: Option<Vec<bool>> =
            causal.then(|| (0..lq * lk).map(|p| p % lk > p / lk).collect());
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(s, e)?;
            let kh = k.slice_cols(s, e)?;
            let vh = v.slice_cols(s, e)?;
            let mut scores = qh.matmul(kh.transpose()?)?.scale(scale);
            if let Some(m) = &mask {
                scores = scores.masked_fill(m, F::neg_infinity())?;
            }
            heads.push(scores.softmax(1)?.matmul(vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            Var::concat_cols(&heads)?
        };
        self.linear(b, &idx.o, cat)
    }

    fn feed_forward<'t>(
        &self,
        b: &Bound<'t, F>,
        fc1: &LinearIdx,
        fc2: &LinearIdx,
        x: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let h = self.linear(b, fc1, x)?.relu();
        self.linear(b, fc2, h)
    }

    /// Encoder states for `source` on an existing tape.
    pub fn encode_on<'t>(
        &self,
        b: &Bound<'t, F>,
        source: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Var<'t, F>> {
        self.check_source(source)?;
        let positions: Vec<usize> = (0..source.len()).collect();
        let tok = b.get(self.layout.tok_emb).embedding(source)?;
        let pos = b.get(self.layout.enc_pos).embedding(&positions)?;
        let mut x = self.dropout(tok.add(pos)?, mode)?;
        for layer in &self.layout.enc {
            let h = self.norm(b, &layer.ln1, x)?;
            let a = self.attention(b, &layer.attn, h, h, false)?;
            x = x.add(self.dropout(a, mode)?)?;
            let h = self.norm(b, &layer.ln2, x)?;
            let f = self.feed_forward(b, &layer.fc1, &layer.fc2, h)?;
            x = x.add(self.dropout(f, mode)?)?;
        }
        self.norm(b, &self.layout.enc_ln, x)
    }

    /// Next-token logits (`len×V`) for every decoder position on an existing tape.
    pub fn decode_on<'t>(
        &self,
        b: &Bound<'t, F>,
        memory: Var<'t, F>,
        tokens: &[usize],
        global: &[usize],
        local: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Var<'t, F>> {
        self.check_positions(tokens, global, local)?;
        let tok = b.get(self.layout.tok_emb).embedding(tokens)?;
        let g = b.get(self.layout.global_pos).embedding(global)?;
        let l = b.get(self.layout.local_pos).embedding(local)?;
        let mut x = self.dropout(tok.add(g)?.add(l)?, mode)?;
        for layer in &self.layout.dec {
            let h = self.norm(b, &layer.ln1, x)?;
            let a = self.attention(b, &layer.self_attn, h, h, true)?;
            x = x.add(self.dropout(a, mode)?)?;
            let h = self.norm(b, &layer.ln2, x)?;
            let c = self.attention(b, &layer.cross_attn, h, memory, false)?;
            x = x.add(self.dropout(c, mode)?)?;
            let h = self.norm(b, &layer.ln3, x)?;
            let f = self.feed_forward(b, &layer.fc1, &layer.fc2, h)?;
            x = x.add(self.dropout(f, mode)?)?;
        }
        let h = self.norm(b, &self.layout.dec_ln, x)?;
        let emb_t = b.get(self.layout.tok_emb).transpose()?;
        h.matmul(emb_t)?.add_row(b.get(self.layout.out_bias))
    }

    /// Teacher-forced logits for a full decoder sequence, from the source.
    pub fn forward_on<'t>(
        &self,
        b: &Bound<'t, F>,
        source: &[usize],
        seq: &DecoderSequence,
        mode: &mut Mode<'_>,
    ) -> Result<Var<'t, F>> {
        let memory = self.encode_on(b, source, mode)?;
        self.decode_on(
            b,
            memory,
            &seq.tokens,
            &seq.global_pos,
            &seq.local_pos,
            mode,
        )
    }

    /// Encoder states (`len(source)×d_model`) in eval mode.
    pub fn encode(&self, source: &[usize]) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let b = self.bind_frozen(&tape);
        Ok(self.encode_on(&b, source, &mut Mode::Eval)?.value())
    }

    /// Eval-mode logits for every prefix position of `seq`; row `i` scores
    /// the token after position `i`.
    pub fn decode_step_logits(
        &self,
        memory: &Tensor<F>,
        seq: &DecoderSequence,
    ) -> Result<Tensor<F>> {
        if memory.shape().len() != 2 || memory.cols() != self.config.d_model {
            return Err(Error::Dimension(format!(
                "memory of shape {:?} does not have {} columns",
                memory.shape(),
                self.config.d_model
            )));
        }
        let tape = Tape::new();
        let b = self.bind_frozen(&tape);
        let mem = tape.constant(memory.clone());
        Ok(self
            .decode_on(
                &b,
                mem,
                &seq.tokens,
                &seq.global_pos,
                &seq.local_pos,
                &mut Mode::Eval,
            )?
            .value())
    }

    /// `log p(token_i | tokens_<i, X)` for every position after `<BOS>`.
    pub fn sequence_logprob(&self, memory: &Tensor<F>, seq: &DecoderSequence) -> Result<Vec<F>> {
        let logits = self.decode_step_logits(memory, seq)?;
        Ok(next_token_logprobs(&logits, &seq.tokens))
    }

    /// Eval-mode teacher-forced NLL, averaged over every position after `<BOS>`.
    pub fn sequence_nll(&self, source: &[usize], seq: &DecoderSequence) -> Result<F> {
        let memory = self.encode(source)?;
        let lp = self.sequence_logprob(&memory, seq)?;
        let n = F::of(lp.len() as f64);
        Ok(-lp.into_iter().sum::<F>() / n)
    }
}

/// Row `i` of `logits` scores `tokens[i + 1]`.
pub fn next_token_logprobs<F: Scalar>(logits: &Tensor<F>, tokens: &[usize]) -> Vec<F> {
    let mut row = vec![F::zero(); logits.cols()];
    (1..tokens.len())
        .map(|i| {
            row.copy_from_slice(logits.row(i - 1));
            log_softmax_in_place(&mut row);
            row[tokens[i]]
        })
        .collect()
}

/// Decoder inputs and targets for teacher forcing: inputs drop the final
/// token, targets drop `<BOS>`.
pub fn teacher_forcing_split(seq: &DecoderSequence) -> (DecoderSequence, Vec<usize>) {
    let n = seq.len() - 1;
    let inputs = DecoderSequence {
        tokens: seq.tokens[..n].to_vec(),
        global_pos: seq.global_pos[..n].to_vec(),
        local_pos: seq.local_pos[..n].to_vec(),
        segment_spans: seq
            .segment_spans
            .iter()
            .copied()
            .filter(|s| s.end <= n)
            .collect(),
    };
    (inputs, seq.tokens[1..].to_vec())
}
