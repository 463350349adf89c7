//! Index selection and token sampling over masked distributions.

use std::cmp::Ordering;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::corpus::{begin_id, EOP};
use crate::error::{Error, Result};

/// Softmax of `logits` restricted to `allowed`; every other entry is 0.
pub fn masked_probs(logits: &[f64], allowed: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    let max = allowed
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return out;
    }
    let mut z = 0.0;
    for &i in allowed {
        out[i] = (logits[i] - max).exp();
        z += out[i];
    }
    for &i in allowed {
        out[i] /= z;
    }
    out
}

fn draw<R: Rng + ?Sized>(items: &[usize], weights: &[f64], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(weights)
        .map_err(|e| Error::NonFinite(format!("cannot sample from weights: {e}")))?;
    Ok(items[dist.sample(rng)])
}

/// Samples a first sentence index from `available`, using the model's
/// renormalized `<B-t>` distribution or, with `uniform`, equal weights.
pub fn select_first_index<R: Rng + ?Sized>(
    logits: &[f64],
    available: &[usize],
    uniform: bool,
    rng: &mut R,
) -> Result<usize> {
    if available.is_empty() {
        return Err(Error::Validation("no sentence index available".into()));
    }
    let weights: Vec<f64> = if uniform {
        vec![1.0; available.len()]
    } else {
        let tokens: Vec<usize> = available.iter().map(|&t| begin_id(t)).collect();
        let p = masked_probs(logits, &tokens);
        tokens.iter().map(|&b| p[b]).collect()
    };
    draw(available, &weights, rng)
}

/// First indices for `k` candidates over the pool `1..=pool`, without
/// replacement. Once the pool is exhausted it is refilled; the flag reports
/// that indices were reused.
pub fn select_first_indices<R: Rng + ?Sized>(
    logits: &[f64],
    pool: usize,
    k: usize,
    uniform: bool,
    rng: &mut R,
) -> Result<(Vec<usize>, bool)> {
    let mut available: Vec<usize> = (1..=pool).collect();
    let mut out = Vec::with_capacity(k);
    let mut replaced = false;
    for _ in 0..k {
        if available.is_empty() {
            available = (1..=pool).collect();
            replaced = true;
        }
        let t = select_first_index(logits, &available, uniform, rng)?;
        available.retain(|&x| x != t);
        out.push(t);
    }
    Ok((out, replaced))
}

/// Greedy choice at a sentence boundary among the unused `<B-t>` tokens and
/// `<EOP>`. Ties go to the lowest index, then `<EOP>`. With nothing
/// remaining the paragraph must end.
pub fn select_next_index(logits: &[f64], remaining: &[usize]) -> usize {
    let mut candidates: Vec<usize> = remaining.iter().map(|&t| begin_id(t)).collect();
    candidates.sort_unstable();
    candidates.push(EOP);
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    best
}

/// `allowed` sorted by descending logit, ties by ascending id.
fn ranked(logits: &[f64], allowed: &[usize]) -> Vec<usize> {
    let mut v = allowed.to_vec();
    v.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    v
}

fn tempered(logits: &[f64], tokens: &[usize], temperature: f64) -> Vec<f64> {
    let max = tokens
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    tokens
        .iter()
        .map(|&i| ((logits[i] - max) / temperature).exp())
        .collect()
}

/// Samples from the `k` most likely allowed tokens, renormalized.
pub fn token_topk<R: Rng + ?Sized>(
    logits: &[f64],
    allowed: &[usize],
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<usize> {
    if k == 0 {
        return Err(Error::Config("top-k needs k >= 1".into()));
    }
    let mut top = ranked(logits, allowed);
    top.truncate(k);
    let w = tempered(logits, &top, temperature);
    draw(&top, &w, rng)
}

/// Samples from the smallest set of most likely allowed tokens whose mass
/// reaches `p`, renormalized.
pub fn token_nucleus<R: Rng + ?Sized>(
    logits: &[f64],
    allowed: &[usize],
    p: f64,
    temperature: f64,
    rng: &mut R,
) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!(
            "nucleus p must lie in (0, 1], got {p}"
        )));
    }
    let order = ranked(logits, allowed);
    let w = tempered(logits, &order, temperature);
    let z: f64 = w.iter().sum();
    let mut mass = 0.0;
    let mut keep = order.len();
    for (i, wi) in w.iter().enumerate() {
        mass += wi / z;
        if mass >= p {
            keep = i + 1;
            break;
        }
    }
    draw(&order[..keep], &w[..keep], rng)
}
