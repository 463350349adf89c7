//! Accuracy and diversity metrics over pre-tokenized hypotheses.
//!
//! Every function takes token lists, so results do not depend on any
//! tokenizer or model. Token types only need `Eq + Hash`.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn ngrams<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_order(n: usize) -> Result<()> {
    if (1..=4).contains(&n) {
        Ok(())
    } else {
        Err(Error::Validation(format!("BLEU order {n} outside 1..=4")))
    }
}

/// Clipped `n`-gram matches of `hyp` against the per-gram maximum over
/// `refs`, and the number of `n`-grams in `hyp`.
fn clipped_matches<T: Eq + Hash>(hyp: &[T], refs: &[&[T]], n: usize) -> (usize, usize) {
    let h = ngrams(hyp, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Reference length closest to `hyp_len`, shorter on ties.
fn closest_ref_len<T>(hyp_len: usize, refs: &[&[T]]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(hyp_len), l))
        .unwrap_or(0)
}

/// Corpus BLEU-`n`: uniform geometric mean of corpus-aggregated clipped
/// precisions times the brevity penalty. Unsmoothed.
pub fn bleu_corpus<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], n: usize) -> Result<f64> {
    check_order(n)?;
    if hyps.is_empty() {
        return Err(Error::Validation("empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Validation(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut log_p = 0.0;
    for m in 1..=n {
        let (mut matched, mut total) = (0, 0);
        for (h, r) in hyps.iter().zip(refs) {
            let (c, t) = clipped_matches(h, &[r.as_slice()], m);
            matched += c;
            total += t;
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_p += (matched as f64 / total as f64).ln() / n as f64;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    Ok(brevity_penalty(c, r) * log_p.exp())
}

fn sentence_bleu_impl<T: Eq + Hash>(
    hyp: &[T],
    refs: &[&[T]],
    n: usize,
    smooth: bool,
) -> Result<f64> {
    check_order(n)?;
    if refs.is_empty() {
        return Err(Error::Validation("no references".into()));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for m in 1..=n {
        let (c, t) = clipped_matches(hyp, refs, m);
        let p = match (c, smooth) {
            (0, true) => 1.0 / (t as f64 + 1.0),
            (0, false) => return Ok(0.0),
            _ => c as f64 / t as f64,
        };
        log_p += p.ln() / n as f64;
    }
    Ok(brevity_penalty(hyp.len(), closest_ref_len(hyp.len(), refs)) * log_p.exp())
}

/// Sentence BLEU-`n` against several references. A precision with no
/// matches becomes `1 / (total + 1)` (add-one smoothing). An empty
/// hypothesis scores 0.
pub fn bleu_sentence_multi<T: Eq + Hash>(hyp: &[T], refs: &[&[T]], n: usize) -> Result<f64> {
    sentence_bleu_impl(hyp, refs, n, true)
}

pub fn bleu_sentence<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> Result<f64> {
    bleu_sentence_multi(hyp, &[reference], n)
}

/// `K` hypotheses and the reference for one source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisGroup<T> {
    pub hypotheses: Vec<Vec<T>>,
    pub reference: Vec<T>,
}

fn check_groups<T>(groups: &[HypothesisGroup<T>]) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::Validation("empty corpus".into()));
    }
    if let Some(i) = groups.iter().position(|g| g.hypotheses.is_empty()) {
        return Err(Error::Validation(format!("source {i} has no hypotheses")));
    }
    Ok(())
}

/// Corpus BLEU-`n` of each source's first hypothesis.
pub fn top1_bleu<T: Eq + Hash + Clone>(groups: &[HypothesisGroup<T>], n: usize) -> Result<f64> {
    check_groups(groups)?;
    let hyps: Vec<Vec<T>> = groups.iter().map(|g| g.hypotheses[0].clone()).collect();
    let refs: Vec<Vec<T>> = groups.iter().map(|g| g.reference.clone()).collect();
    bleu_corpus(&hyps, &refs, n)
}

/// Per source, the hypothesis with the best sentence BLEU-`n` (earliest on
/// ties). Hypotheses are compared on unsmoothed BLEU first and smoothed
/// BLEU second, so a pick never scores below the first hypothesis under the
/// corpus metric of its own group.
pub fn oracle_selection<T: Eq + Hash>(
    groups: &[HypothesisGroup<T>],
    n: usize,
) -> Result<Vec<usize>> {
    check_groups(groups)?;
    groups
        .iter()
        .map(|g| {
            let mut best = (0, (f64::NEG_INFINITY, f64::NEG_INFINITY));
            for (i, h) in g.hypotheses.iter().enumerate() {
                let key = (
                    sentence_bleu_impl(h, &[g.reference.as_slice()], n, false)?,
                    bleu_sentence(h, &g.reference, n)?,
                );
                if key > best.1 {
                    best = (i, key);
                }
            }
            Ok(best.0)
        })
        .collect()
}

/// Corpus BLEU-`n` over the per-source best hypotheses.
pub fn oracle_metric<T: Eq + Hash + Clone>(groups: &[HypothesisGroup<T>], n: usize) -> Result<f64> {
    let pick = oracle_selection(groups, n)?;
    let hyps: Vec<Vec<T>> = groups
        .iter()
        .zip(&pick)
        .map(|(g, &i)| g.hypotheses[i].clone())
        .collect();
    let refs: Vec<Vec<T>> = groups.iter().map(|g| g.reference.clone()).collect();
    bleu_corpus(&hyps, &refs, n)
}

fn pooled_counts<T: Eq + Hash>(texts: &[Vec<T>], k: usize) -> HashMap<&[T], usize> {
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    for t in texts {
        for (g, c) in ngrams(t, k) {
            *counts.entry(g).or_insert(0) += c;
        }
    }
    counts
}

/// Unique `k`-grams over all `k`-grams, pooled across texts; 0 when there
/// are none.
pub fn distinct_k<T: Eq + Hash>(texts: &[Vec<T>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let counts = pooled_counts(texts, k);
    let total: usize = counts.values().sum();
    Ok(if total == 0 {
        0.0
    } else {
        counts.len() as f64 / total as f64
    })
}

/// Shannon entropy in bits of the pooled `k`-gram distribution; 0 when
/// there are no `k`-grams.
pub fn entropy_k<T: Eq + Hash>(texts: &[Vec<T>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let counts = pooled_counts(texts, k);
    let total: usize = counts.values().sum();
    if total == 0 {
        return Ok(0.0);
    }
    let s = total as f64;
    // Fixed summation order keeps the result deterministic.
    let mut freqs: Vec<usize> = counts.into_values().collect();
    freqs.sort_unstable();
    let h: f64 = freqs
        .into_iter()
        .map(|c| {
            let p = c as f64 / s;
            -p * p.log2()
        })
        .sum();
    Ok(h.max(0.0))
}

/// How each hypothesis is compared with the others.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfBleuMode {
    /// Mean over ordered pairs `(i, j)`, `i ≠ j`.
    #[default]
    Pairwise,
    /// Each hypothesis against all others as joint references.
    OneVsRest,
}

/// Self-BLEU-`n` of one group; `None` for fewer than two hypotheses.
pub fn self_bleu_with<T: Eq + Hash>(
    group: &[Vec<T>],
    n: usize,
    mode: SelfBleuMode,
) -> Result<Option<f64>> {
    check_order(n)?;
    let k = group.len();
    if k < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..k {
        match mode {
            SelfBleuMode::Pairwise => {
                for j in (0..k).filter(|&j| j != i) {
                    total += bleu_sentence(&group[i], &group[j], n)?;
                    count += 1;
                }
            }
            SelfBleuMode::OneVsRest => {
                let refs: Vec<&[T]> = (0..k)
                    .filter(|&j| j != i)
                    .map(|j| group[j].as_slice())
                    .collect();
                total += bleu_sentence_multi(&group[i], &refs, n)?;
                count += 1;
            }
        }
    }
    Ok(Some(total / count as f64))
}

pub fn self_bleu<T: Eq + Hash>(group: &[Vec<T>], n: usize) -> Result<Option<f64>> {
    self_bleu_with(group, n, SelfBleuMode::Pairwise)
}

/// Mean Self-BLEU over sources with at least two hypotheses.
pub fn corpus_self_bleu<T: Eq + Hash>(
    groups: &[Vec<Vec<T>>],
    n: usize,
    mode: SelfBleuMode,
) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    for g in groups {
        if let Some(s) = self_bleu_with(g, n, mode)? {
            scores.push(s);
        }
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

/// Named scalar results, a per-source breakdown, and the settings used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    /// Metrics that are undefined for this input (for example Self-BLEU with K = 1).
    pub absent: Vec<String>,
    pub per_source: Vec<BTreeMap<String, f64>>,
    pub config: serde_json::Value,
}

/// Settings for [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub self_bleu_mode: SelfBleuMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            self_bleu_mode: SelfBleuMode::Pairwise,
        }
    }
}

/// Top-1 BLEU-1..4, Oracle BLEU-4, Distinct-2/3, Entropy-1..4 and
/// Self-BLEU-3/4. Diversity metrics pool all hypotheses of all sources.
pub fn evaluate<T: Eq + Hash + Clone>(
    groups: &[HypothesisGroup<T>],
    opts: &EvalOptions,
) -> Result<MetricReport> {
    check_groups(groups)?;
    let mut metrics = BTreeMap::new();
    let mut absent = Vec::new();
    for n in 1..=4 {
        metrics.insert(format!("bleu{n}"), top1_bleu(groups, n)?);
    }
    metrics.insert("oracle_bleu4".into(), oracle_metric(groups, 4)?);
    let pooled: Vec<Vec<T>> = groups.iter().flat_map(|g| g.hypotheses.clone()).collect();
    for k in [2, 3] {
        metrics.insert(format!("distinct{k}"), distinct_k(&pooled, k)?);
    }
    for k in 1..=4 {
        metrics.insert(format!("entropy{k}"), entropy_k(&pooled, k)?);
    }
    let hyp_sets: Vec<Vec<Vec<T>>> = groups.iter().map(|g| g.hypotheses.clone()).collect();
    for n in [3, 4] {
        let name = format!("self_bleu{n}");
        match corpus_self_bleu(&hyp_sets, n, opts.self_bleu_mode)? {
            Some(v) => {
                metrics.insert(name, v);
            }
            None => absent.push(name),
        }
    }
    let pick = oracle_selection(groups, 4)?;
    let per_source = groups
        .iter()
        .zip(pick)
        .map(|(g, best)| {
            let mut m = BTreeMap::new();
            m.insert(
                "bleu4".into(),
                bleu_sentence(&g.hypotheses[0], &g.reference, 4)?,
            );
            m.insert("oracle_index".into(), best as f64);
            if let Some(s) = self_bleu_with(&g.hypotheses, 4, opts.self_bleu_mode)? {
                m.insert("self_bleu4".into(), s);
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        metrics,
        absent,
        per_source,
        config: serde_json::json!({
            "num_sources": groups.len(),
            "self_bleu_mode": opts.self_bleu_mode,
        }),
    })
}

impl MetricReport {
    /// Two aligned columns, one metric per line.
    pub fn to_table(&self) -> String {
        let width = self
            .metrics
            .keys()
            .chain(&self.absent)
            .map(String::len)
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k:<width$}  {v:.4}\n"));
        }
        for k in &self.absent {
            out.push_str(&format!("{k:<width$}  n/a\n"));
        }
        out
    }
}
