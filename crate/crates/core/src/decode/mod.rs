//! Sentence-indexed decoding.
//!
//! A candidate starts with `<BOS>` and a sampled first sentence index. Each
//! sentence body is produced by a pluggable token strategy over content
//! tokens plus the matching `<E-t>`. At every sentence boundary the next
//! index is the argmax over the unused `<B-t>` tokens and `<EOP>`. Finished
//! sentences are finally sorted by index. Candidates are independent and
//! ranked by their mean per-token log-probability.

mod strategy;

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{begin_id, begin_index, end_id, is_content, BOS, EOP, TMAX};
use crate::error::{Error, Result};
use crate::model::{EncodedSource, IncrementalDecoder, Model};
use crate::sequence::{parse_and_reorder, DecoderSequence, Permutation};
use crate::tensor::{log_softmax_in_place, Scalar};

pub use strategy::{
    masked_probs, select_first_index, select_first_indices, select_next_index, token_nucleus,
    token_topk,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Beam,
    Topk,
    Nucleus,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beam" => Ok(Self::Beam),
            "topk" => Ok(Self::Topk),
            "nucleus" => Ok(Self::Nucleus),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?}; expected beam, topk or nucleus"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: StrategyKind,
    pub beam_width: usize,
    pub top_k: usize,
    pub top_p: f64,
    /// Number of candidates `K`.
    pub num_candidates: usize,
    /// Body-token cap per sentence; `None` uses the model's limit.
    pub max_sentence_tokens: Option<usize>,
    /// Sentence indices available to the decoder (`1..=n`); `None` means all.
    pub num_sentences: Option<usize>,
    pub seed: u64,
    /// Applies to sampling strategies only.
    pub temperature: f64,
    pub uniform_first: bool,
    /// Fixes the sentence order of every candidate.
    pub force_order: Option<Vec<usize>>,
    pub threads: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Beam,
            beam_width: 4,
            top_k: 10,
            top_p: 0.9,
            num_candidates: 3,
            max_sentence_tokens: None,
            num_sentences: None,
            seed: 0,
            temperature: 1.0,
            uniform_first: false,
            force_order: None,
            threads: 1,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.beam_width == 0 {
            return bad("decode.beam_width must be at least 1");
        }
        if self.top_k == 0 {
            return bad("decode.top_k must be at least 1");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("decode.top_p must lie in (0, 1]");
        }
        if self.num_candidates == 0 {
            return bad("decode.num_candidates must be at least 1");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("decode.temperature must be positive");
        }
        if self.max_sentence_tokens == Some(0) {
            return bad("decode.max_sentence_tokens must be positive");
        }
        if let Some(n) = self.num_sentences {
            if !(1..=TMAX).contains(&n) {
                return Err(Error::Config(format!(
                    "decode.num_sentences must lie in 1..={TMAX}"
                )));
            }
        }
        if let Some(order) = &self.force_order {
            Permutation::new(order.clone())
                .map_err(|e| Error::Config(format!("decode.force_order: {e}")))?;
        }
        if self.threads == 0 {
            return bad("decode.threads must be positive");
        }
        Ok(())
    }

    fn pool_size(&self) -> usize {
        match &self.force_order {
            Some(o) => o.len(),
            None => self.num_sentences.unwrap_or(TMAX),
        }
    }
}

/// Where a decode is in the sentence-level state machine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    AwaitingIndex,
    InSentence(usize),
    Finished,
}

/// One partially decoded candidate.
#[derive(Clone)]
pub struct DecodeState<'a, F: Scalar> {
    decoder: IncrementalDecoder<'a, F>,
    sequence: DecoderSequence,
    /// Full-model log-probabilities of the next token.
    next: Vec<f64>,
    token_logprobs: Vec<f64>,
    body_len: usize,
    truncated: bool,
}

impl<'a, F: Scalar> DecodeState<'a, F> {
    /// Feeds `<BOS>`.
    pub fn start(model: &'a Model<F>, source: &'a EncodedSource<F>) -> Result<Self> {
        let mut decoder = IncrementalDecoder::new(model, source);
        let next = log_probs(decoder.step(BOS, 0, 0)?);
        Ok(Self {
            decoder,
            sequence: DecoderSequence::start(),
            next,
            token_logprobs: Vec::new(),
            body_len: 0,
            truncated: false,
        })
    }

    pub fn phase(&self) -> Phase {
        if self.sequence.is_finished() {
            Phase::Finished
        } else if let Some(t) = self.sequence.open_segment() {
            Phase::InSentence(t)
        } else {
            Phase::AwaitingIndex
        }
    }

    pub fn sequence(&self) -> &DecoderSequence {
        &self.sequence
    }

    /// Indices of all opened sentences, in generation order.
    pub fn used_indices(&self) -> Vec<usize> {
        self.sequence.realized_order()
    }

    /// Full-model log-probabilities of the next token.
    pub fn next_logprobs(&self) -> &[f64] {
        &self.next
    }

    pub fn token_logprobs(&self) -> &[f64] {
        &self.token_logprobs
    }

    pub fn cumulative_logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    /// Body tokens emitted in the open sentence.
    pub fn body_len(&self) -> usize {
        self.body_len
    }

    /// Appends `token`, checking the grammar and recording its log-prob.
    pub fn push(&mut self, token: usize) -> Result<()> {
        let lp = *self.next.get(token).ok_or_else(|| {
            Error::Index(format!(
                "token {token} outside vocabulary of {}",
                self.next.len()
            ))
        })?;
        self.sequence.push(token)?;
        self.token_logprobs.push(lp);
        if begin_index(token).is_some() {
            self.body_len = 0;
        } else if is_content(token) {
            self.body_len += 1;
        }
        if token != EOP {
            let i = self.sequence.len() - 1;
            let logits = self.decoder.step(
                token,
                self.sequence.global_pos[i],
                self.sequence.local_pos[i],
            )?;
            self.next = log_probs(logits);
        }
        Ok(())
    }
}

fn log_probs<F: Scalar>(logits: Vec<F>) -> Vec<f64> {
    let mut v: Vec<f64> = logits.into_iter().map(|x| x.as_f64()).collect();
    log_softmax_in_place(&mut v);
    v
}

/// Tokens allowed inside sentence `t`: content ids plus `<E-t>`.
fn sentence_vocab(vocab: usize, t: usize) -> Vec<usize> {
    (0..vocab)
        .filter(|&i| is_content(i) || i == end_id(t))
        .collect()
}

/// Generates the rest of the open sentence, through its `<E-t>`. At `cap`
/// body tokens `<E-t>` is forced and the candidate is flagged truncated.
pub fn generate_sentence<'a, F: Scalar, R: Rng + ?Sized>(
    state: DecodeState<'a, F>,
    cfg: &DecodeConfig,
    cap: usize,
    rng: &mut R,
) -> Result<DecodeState<'a, F>> {
    let Phase::InSentence(t) = state.phase() else {
        return Err(Error::Usage(
            "generate_sentence needs an open sentence".into(),
        ));
    };
    let allowed = sentence_vocab(state.next.len(), t);
    let end = end_id(t);
    match cfg.strategy {
        StrategyKind::Beam => beam_sentence(state, &allowed, end, cfg.beam_width, cap),
        StrategyKind::Topk | StrategyKind::Nucleus => {
            let mut state = state;
            loop {
                if state.body_len >= cap {
                    state.truncated = true;
                    state.push(end)?;
                    return Ok(state);
                }
                let tok = match cfg.strategy {
                    StrategyKind::Topk => {
                        token_topk(&state.next, &allowed, cfg.top_k, cfg.temperature, rng)?
                    }
                    _ => token_nucleus(&state.next, &allowed, cfg.top_p, cfg.temperature, rng)?,
                };
                state.push(tok)?;
                if tok == end {
                    return Ok(state);
                }
            }
        }
    }
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Beam search over one sentence; scores are summed full-model log-probs.
fn beam_sentence<'a, F: Scalar>(
    state: DecodeState<'a, F>,
    allowed: &[usize],
    end: usize,
    width: usize,
    cap: usize,
) -> Result<DecodeState<'a, F>> {
    let mut live: Vec<(f64, DecodeState<'a, F>)> = vec![(0.0, state)];
    let mut done: Vec<(f64, DecodeState<'a, F>)> = Vec::new();
    while !live.is_empty() {
        let mut expansions: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, (score, st)) in live.iter().enumerate() {
            if st.body_len >= cap {
                expansions.push((*score + st.next[end], bi, end));
                continue;
            }
            let mut toks: Vec<usize> = allowed.to_vec();
            toks.sort_by(|&a, &b| by_score_desc(st.next[a], st.next[b]).then(a.cmp(&b)));
            toks.truncate(width);
            expansions.extend(toks.into_iter().map(|tok| (*score + st.next[tok], bi, tok)));
        }
        expansions.sort_by(|a, b| by_score_desc(a.0, b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        expansions.truncate(width);
        let mut next_live = Vec::new();
        for (score, bi, tok) in expansions {
            let mut st = live[bi].1.clone();
            if tok == end && st.body_len >= cap {
                st.truncated = true;
            }
            st.push(tok)?;
            if tok == end {
                done.push((score, st));
            } else {
                next_live.push((score, st));
            }
        }
        live = next_live;
        done.sort_by(|a, b| by_score_desc(a.0, b.0));
        // Scores only fall as beams grow, so a finished leader cannot be overtaken.
        let best_live = live.iter().map(|b| b.0).fold(f64::NEG_INFINITY, f64::max);
        if done.len() >= width || done.first().is_some_and(|d| d.0 >= best_live) {
            break;
        }
    }
    let (_, best) = done
        .into_iter()
        .next()
        .expect("beam always finishes at the cap");
    Ok(best)
}

/// A finished paragraph hypothesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Sentence bodies sorted by index.
    pub sentences: Vec<Vec<usize>>,
    /// Sentence indices, ascending, parallel to `sentences`.
    pub indices: Vec<usize>,
    /// Indices in the order they were generated.
    pub order: Vec<usize>,
    /// Generated tokens after `<BOS>`, in generation order.
    pub tokens: Vec<usize>,
    /// Full-model log-probability of each token in `tokens`.
    pub token_logprobs: Vec<f64>,
    /// Mean of `token_logprobs`.
    pub score: f64,
    pub truncated: bool,
}

impl Candidate {
    /// Number of scored tokens, special tokens included.
    pub fn len(&self) -> usize {
        self.token_logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_logprobs.is_empty()
    }

    fn from_state<F: Scalar>(state: DecodeState<'_, F>) -> Result<Self> {
        let parsed = parse_and_reorder(&state.sequence.tokens)?;
        if !parsed.terminated {
            return Err(Error::Usage("candidate is not finished".into()));
        }
        let score = sequence_score(&state.token_logprobs)?;
        Ok(Self {
            indices: parsed.sentences.iter().map(|(i, _)| *i).collect(),
            sentences: parsed.bodies(),
            order: parsed.order,
            tokens: state.sequence.tokens[1..].to_vec(),
            token_logprobs: state.token_logprobs,
            score,
            truncated: state.truncated,
        })
    }
}

/// Mean per-token log-probability.
pub fn sequence_score(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::Validation(
            "cannot score a candidate with no tokens".into(),
        ));
    }
    Ok(logprobs.iter().sum::<f64>() / logprobs.len() as f64)
}

/// Sorts by descending score; equal scores keep their input order.
pub fn rank_candidates(mut cands: Vec<Candidate>) -> Result<Vec<Candidate>> {
    for c in &mut cands {
        c.score = sequence_score(&c.token_logprobs)?;
    }
    cands.sort_by(|a, b| by_score_desc(a.score, b.score));
    Ok(cands)
}

/// Runs the state machine from a state positioned right after `<B-first>`.
fn finish_candidate<'a, F: Scalar, R: Rng + ?Sized>(
    mut state: DecodeState<'a, F>,
    cfg: &DecodeConfig,
    cap: usize,
    rng: &mut R,
) -> Result<DecodeState<'a, F>> {
    let pool = cfg.pool_size();
    let mut forced = cfg.force_order.iter().flatten().skip(1).copied();
    loop {
        match state.phase() {
            Phase::Finished => return Ok(state),
            Phase::InSentence(_) => state = generate_sentence(state, cfg, cap, rng)?,
            Phase::AwaitingIndex => {
                let token = if cfg.force_order.is_some() {
                    forced.next().map_or(EOP, begin_id)
                } else {
                    let used = state.used_indices();
                    let remaining: Vec<usize> = (1..=pool).filter(|t| !used.contains(t)).collect();
                    select_next_index(&state.next, &remaining)
                };
                state.push(token)?;
            }
        }
    }
}

/// Ranked candidates for one source, plus how they were produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub candidates: Vec<Candidate>,
    /// More candidates than indices: first indices were reused.
    pub first_index_with_replacement: bool,
    pub first_indices: Vec<usize>,
}

/// Body-token cap for a config and model.
pub fn sentence_cap<F: Scalar>(model: &Model<F>, cfg: &DecodeConfig) -> usize {
    let limit = model.config().max_sentence_body();
    cfg.max_sentence_tokens.map_or(limit, |c| c.min(limit))
}

/// Decodes `K` candidates for `source` and ranks them.
///
/// Candidate `k` draws from its own stream seeded with `seed ^ k`, so the
/// result does not depend on `threads`.
pub fn decode_paragraph<F: Scalar>(
    model: &Model<F>,
    source: &[usize],
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    let encoded = model.encode_source(source)?;
    let root = DecodeState::start(model, &encoded)?;
    let k = cfg.num_candidates;
    let (firsts, replaced) = match &cfg.force_order {
        Some(order) => (vec![order[0]; k], false),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(u64::MAX);
            select_first_indices(&root.next, cfg.pool_size(), k, cfg.uniform_first, &mut rng)?
        }
    };
    let cap = sentence_cap(model, cfg);
    let run = |i: usize| -> Result<Candidate> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ i as u64);
        let mut st = root.clone();
        st.push(begin_id(firsts[i]))?;
        Candidate::from_state(finish_candidate(st, cfg, cap, &mut rng)?)
    };
    let results: Vec<Result<Candidate>> = if cfg.threads <= 1 || k == 1 {
        (0..k).map(run).collect()
    } else {
        let run = &run;
        std::thread::scope(|s| {
            let chunk = k.div_ceil(cfg.threads);
            let handles: Vec<_> = (0..k)
                .step_by(chunk)
                .map(|lo| s.spawn(move || (lo..(lo + chunk).min(k)).map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("decode worker panicked"))
                .collect()
        })
    };
    let candidates = rank_candidates(results.into_iter().collect::<Result<_>>()?)?;
    Ok(DecodeOutput {
        candidates,
        first_index_with_replacement: replaced,
        first_indices: firsts,
    })
}

/// Conventional left-to-right baseline: a paragraph-level beam over the
/// identity order `1..=num_sentences`, returning the top `k` finished beams.
/// Sentence markers are forced; only body tokens and sentence ends branch.
pub fn fixed_order_beam<F: Scalar>(
    model: &Model<F>,
    source: &[usize],
    num_sentences: usize,
    width: usize,
    k: usize,
    max_sentence_tokens: Option<usize>,
) -> Result<Vec<Candidate>> {
    if !(1..=TMAX).contains(&num_sentences) || width == 0 || k == 0 || k > width {
        return Err(Error::Config(format!(
            "fixed-order beam needs 1 <= num_sentences <= {TMAX} and 1 <= k <= width"
        )));
    }
    let limit = model.config().max_sentence_body();
    let cap = max_sentence_tokens.map_or(limit, |c| c.min(limit));
    let encoded = model.encode_source(source)?;
    let mut root = DecodeState::start(model, &encoded)?;
    root.push(begin_id(1))?;
    let vocab = root.next.len();
    let mut live: Vec<(f64, DecodeState<'_, F>)> = vec![(root.cumulative_logprob(), root)];
    let mut done: Vec<(f64, DecodeState<'_, F>)> = Vec::new();
    while !live.is_empty() && done.len() < width {
        let mut expansions: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, (score, st)) in live.iter().enumerate() {
            let Phase::InSentence(t) = st.phase() else {
                unreachable!("live beams are inside a sentence")
            };
            let end = end_id(t);
            let toks: Vec<usize> = if st.body_len >= cap {
                vec![end]
            } else {
                let mut toks = sentence_vocab(vocab, t);
                toks.sort_by(|&a, &b| by_score_desc(st.next[a], st.next[b]).then(a.cmp(&b)));
                toks.truncate(width);
                toks
            };
            expansions.extend(toks.into_iter().map(|tok| (*score + st.next[tok], bi, tok)));
        }
        expansions.sort_by(|a, b| by_score_desc(a.0, b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        expansions.truncate(width - done.len());
        let mut next_live = Vec::new();
        for (_, bi, tok) in expansions {
            let mut st = live[bi].1.clone();
            if st.body_len >= cap {
                st.truncated = true;
            }
            st.push(tok)?;
            if let Some(t) = crate::corpus::end_index(tok) {
                st.push(if t == num_sentences {
                    EOP
                } else {
                    begin_id(t + 1)
                })?;
            }
            let score = st.cumulative_logprob();
            if st.phase() == Phase::Finished {
                done.push((score, st));
            } else {
                next_live.push((score, st));
            }
        }
        live = next_live;
    }
    done.sort_by(|a, b| by_score_desc(a.0, b.0));
    let cands = done
        .into_iter()
        .take(k)
        .map(|(_, st)| Candidate::from_state(st))
        .collect::<Result<Vec<_>>>()?;
    rank_candidates(cands)
}
