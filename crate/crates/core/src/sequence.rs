//! Sentence orders and the flat decoder sequence with hierarchical
//! (sentence-index, within-sentence) positions.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{self, Paragraph, BOS, EOP, TMAX};
use crate::error::{Error, Result};

/// Global position carried by `<EOP>`.
pub const EOP_GLOBAL: usize = TMAX + 1;

/// A generation order over 1-based sentence indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let t = order.len();
        if !(1..=TMAX).contains(&t) {
            return Err(Error::Validation(format!(
                "order of length {t}; expected 1..={TMAX}"
            )));
        }
        let mut seen = vec![false; t + 1];
        for &i in &order {
            if i == 0 || i > t || seen[i] {
                return Err(Error::Validation(format!(
                    "{order:?} is not a permutation of 1..={t}"
                )));
            }
            seen[i] = true;
        }
        Ok(Self(order))
    }

    pub fn identity(t: usize) -> Result<Self> {
        Self::new((1..=t).collect())
    }

    pub fn order(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &t)| t == i + 1)
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

fn check_count(t: usize) -> Result<()> {
    if (1..=TMAX).contains(&t) {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "sentence count {t} outside 1..={TMAX}"
        )))
    }
}

/// All `t!` orders in lexicographic order.
pub fn enumerate_orders(t: usize) -> Result<Vec<Permutation>> {
    check_count(t)?;
    let mut cur: Vec<usize> = (1..=t).collect();
    let mut out = vec![Permutation(cur.clone())];
    // Standard next-permutation.
    loop {
        let Some(i) = (0..t.saturating_sub(1))
            .rev()
            .find(|&i| cur[i] < cur[i + 1])
        else {
            return Ok(out);
        };
        let j = (i + 1..t)
            .rev()
            .find(|&j| cur[j] > cur[i])
            .expect("pivot exists");
        cur.swap(i, j);
        cur[i + 1..].reverse();
        out.push(Permutation(cur.clone()));
    }
}

/// Uniform order via a Fisher–Yates shuffle.
pub fn sample_order<R: Rng + ?Sized>(t: usize, rng: &mut R) -> Result<Permutation> {
    check_count(t)?;
    let mut order: Vec<usize> = (1..=t).collect();
    order.shuffle(rng);
    Ok(Permutation(order))
}

/// One `<B-t> … <E-t>` span; `end` is exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSpan {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

/// Flat decoder input with parallel global/local position lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderSequence {
    pub tokens: Vec<usize>,
    pub global_pos: Vec<usize>,
    pub local_pos: Vec<usize>,
    pub segment_spans: Vec<SegmentSpan>,
}

impl Default for DecoderSequence {
    fn default() -> Self {
        Self::start()
    }
}

impl DecoderSequence {
    /// A sequence holding only `<BOS>`.
    pub fn start() -> Self {
        Self {
            tokens: vec![BOS],
            global_pos: vec![0],
            local_pos: vec![0],
            segment_spans: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of the segment currently open, if any.
    pub fn open_segment(&self) -> Option<usize> {
        let last = *self.tokens.last()?;
        if last == EOP || corpus::end_index(last).is_some() || last == BOS {
            return None;
        }
        Some(self.global_pos[self.len() - 1])
    }

    pub fn is_finished(&self) -> bool {
        self.tokens.last() == Some(&EOP)
    }

    /// Appends a token, assigning its positions and checking the grammar.
    pub fn push(&mut self, token: usize) -> Result<()> {
        let position = self.len();
        let err = |message: String| Err(Error::Grammar { position, message });
        if self.is_finished() {
            return err("token after <EOP>".into());
        }
        let open = self.open_segment();
        if let Some(t) = corpus::begin_index(token) {
            if let Some(o) = open {
                return err(format!("<B-{t}> while <B-{o}> is still open"));
            }
            if self.segment_spans.iter().any(|s| s.index == t) {
                return err(format!("sentence index {t} used twice"));
            }
            self.tokens.push(token);
            self.global_pos.push(t);
            self.local_pos.push(1);
            return Ok(());
        }
        if let Some(t) = corpus::end_index(token) {
            match open {
                Some(o) if o == t => {
                    let start = position - self.local_pos[position - 1];
                    self.tokens.push(token);
                    self.global_pos.push(t);
                    self.local_pos.push(self.local_pos[position - 1] + 1);
                    self.segment_spans.push(SegmentSpan {
                        index: t,
                        start,
                        end: position + 1,
                    });
                    return Ok(());
                }
                Some(o) => return err(format!("<E-{t}> closes <B-{o}>")),
                None => return err(format!("<E-{t}> without a matching <B-{t}>")),
            }
        }
        if token == EOP {
            if let Some(o) = open {
                return err(format!("<EOP> while <B-{o}> is still open"));
            }
            self.tokens.push(EOP);
            self.global_pos.push(EOP_GLOBAL);
            self.local_pos.push(1);
            return Ok(());
        }
        if !corpus::is_content(token) {
            return err(format!("reserved id {token} cannot appear here"));
        }
        match open {
            Some(t) => {
                self.tokens.push(token);
                self.global_pos.push(t);
                self.local_pos.push(self.local_pos[position - 1] + 1);
                Ok(())
            }
            None => err("text token outside a sentence segment".into()),
        }
    }

    /// Sentence indices in the order their segments were opened.
    pub fn realized_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = self.segment_spans.iter().map(|s| s.index).collect();
        if let Some(t) = self.open_segment() {
            order.push(t);
        }
        order
    }
}

/// `<BOS>`, then `<B-t> Y_t <E-t>` for each `t` in `order`, then `<EOP>`.
pub fn build_decoder_sequence(p: &Paragraph, order: &Permutation) -> Result<DecoderSequence> {
    if order.len() != p.num_sentences() {
        return Err(Error::Validation(format!(
            "order {order} does not fit a paragraph of {} sentences",
            p.num_sentences()
        )));
    }
    let mut seq = DecoderSequence::start();
    for &t in order.order() {
        seq.push(corpus::begin_id(t))?;
        for &tok in &p.sentences[t - 1] {
            seq.push(tok)?;
        }
        seq.push(corpus::end_id(t))?;
    }
    seq.push(EOP)?;
    Ok(seq)
}

/// Sentences recovered from a decoder token stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedParagraph {
    /// Indices in generation order.
    pub order: Vec<usize>,
    /// `(index, body)` sorted by ascending index.
    pub sentences: Vec<(usize, Vec<usize>)>,
    pub terminated: bool,
}

impl ParsedParagraph {
    pub fn bodies(&self) -> Vec<Vec<usize>> {
        self.sentences.iter().map(|(_, b)| b.clone()).collect()
    }
}

/// Splits a token stream into segments and sorts them by sentence index.
/// A leading `<BOS>` and a trailing `<EOP>` are optional.
pub fn parse_and_reorder(tokens: &[usize]) -> Result<ParsedParagraph> {
    let mut order = Vec::new();
    let mut segments: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut open: Option<(usize, Vec<usize>)> = None;
    let mut terminated = false;
    for (pos, &tok) in tokens.iter().enumerate() {
        let fail = |message: String| {
            Err(Error::Grammar {
                position: pos,
                message,
            })
        };
        if terminated {
            return fail("token after <EOP>".into());
        }
        if tok == BOS {
            if pos == 0 {
                continue;
            }
            return fail("<BOS> after the start".into());
        }
        if let Some(t) = corpus::begin_index(tok) {
            if let Some((o, _)) = &open {
                return fail(format!("<B-{t}> while <B-{o}> is unclosed"));
            }
            if order.contains(&t) {
                return fail(format!("duplicate sentence index {t}"));
            }
            order.push(t);
            open = Some((t, Vec::new()));
        } else if let Some(t) = corpus::end_index(tok) {
            match open.take() {
                Some((o, body)) if o == t => segments.push((t, body)),
                Some((o, _)) => return fail(format!("<E-{t}> closes <B-{o}>")),
                None => return fail(format!("<E-{t}> without <B-{t}>")),
            }
        } else if tok == EOP {
            if let Some((o, _)) = &open {
                return fail(format!("<EOP> while <B-{o}> is unclosed"));
            }
            terminated = true;
        } else if corpus::is_content(tok) {
            match &mut open {
                Some((_, body)) => body.push(tok),
                None => return fail("text token outside a sentence segment".into()),
            }
        } else {
            return fail(format!("unexpected reserved id {tok}"));
        }
    }
    if let Some((o, _)) = open {
        return Err(Error::Grammar {
            position: tokens.len(),
            message: format!("sequence ends inside <B-{o}>"),
        });
    }
    segments.sort_by_key(|(i, _)| *i);
    Ok(ParsedParagraph {
        order,
        sentences: segments,
        terminated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{begin_id as b, end_id as e};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{HashMap, HashSet};

    const W1: usize = 30;
    const W2: usize = 31;
    const W3: usize = 32;

    #[test]
    fn enumerate_orders_counts() {
        assert_eq!(enumerate_orders(3).unwrap().len(), 6);
        assert_eq!(enumerate_orders(1).unwrap(), vec![Permutation(vec![1])]);
        let four = enumerate_orders(4).unwrap();
        let set: HashSet<_> = four.iter().cloned().collect();
        assert_eq!(four.len(), 24);
        assert_eq!(set.len(), 24);
        let mut sorted = four.clone();
        sorted.sort();
        assert_eq!(sorted, four);
        assert!(enumerate_orders(0).is_err());
        assert!(enumerate_orders(11).is_err());
    }

    #[test]
    fn sample_order_is_uniform_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_order(1, &mut rng).unwrap().order(), &[1]);

        let mut counts: HashMap<Permutation, usize> = HashMap::new();
        let n = 60_000;
        for _ in 0..n {
            *counts
                .entry(sample_order(3, &mut rng).unwrap())
                .or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        for c in counts.values() {
            assert!((*c as f64 / n as f64 - 1.0 / 6.0).abs() < 0.01);
        }

        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..5)
                .map(|_| sample_order(5, &mut r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn permutation_validation() {
        assert!(Permutation::new(vec![2, 1]).is_ok());
        assert!(Permutation::new(vec![1, 1]).is_err());
        assert!(Permutation::new(vec![0, 1]).is_err());
        assert!(Permutation::new(vec![]).is_err());
        assert!(Permutation::identity(4).unwrap().is_identity());
    }

    #[test]
    fn worked_example_two_sentences_reversed() {
        let p = Paragraph::new(vec![W1], vec![vec![W1], vec![W2, W3]]).unwrap();
        let seq = build_decoder_sequence(&p, &Permutation::new(vec![2, 1]).unwrap()).unwrap();
        assert_eq!(seq.tokens, [BOS, b(2), W2, W3, e(2), b(1), W1, e(1), EOP]);
        assert_eq!(seq.global_pos, [0, 2, 2, 2, 2, 1, 1, 1, 11]);
        assert_eq!(seq.local_pos, [0, 1, 2, 3, 4, 1, 2, 3, 1]);
        assert_eq!(
            seq.segment_spans,
            [
                SegmentSpan {
                    index: 2,
                    start: 1,
                    end: 5
                },
                SegmentSpan {
                    index: 1,
                    start: 5,
                    end: 8
                }
            ]
        );
    }

    #[test]
    fn identity_single_sentence() {
        let p = Paragraph::new(vec![W1], vec![vec![W2, W3]]).unwrap();
        let seq = build_decoder_sequence(&p, &Permutation::identity(1).unwrap()).unwrap();
        assert_eq!(seq.tokens, [BOS, b(1), W2, W3, e(1), EOP]);
        assert!(build_decoder_sequence(&p, &Permutation::identity(2).unwrap()).is_err());
    }

    #[test]
    fn parse_sorts_gapped_indices() {
        let toks = [BOS, b(5), W1, e(5), b(2), W2, W3, e(2), EOP];
        let parsed = parse_and_reorder(&toks).unwrap();
        assert_eq!(parsed.sentences, vec![(2, vec![W2, W3]), (5, vec![W1])]);
        assert_eq!(parsed.order, [5, 2]);
        assert!(parsed.terminated);
    }

    #[test]
    fn parse_grammar_errors() {
        let pos = |toks: &[usize]| match parse_and_reorder(toks) {
            Err(Error::Grammar { position, .. }) => position,
            other => panic!("expected grammar error, got {other:?}"),
        };
        assert_eq!(pos(&[b(1), W1, b(2), W2, e(2)]), 2);
        assert_eq!(pos(&[b(1), W1, e(1), b(1), e(1)]), 3);
        assert_eq!(pos(&[b(1), W1, e(2)]), 2);
        assert_eq!(pos(&[W1]), 0);
        assert_eq!(pos(&[b(1), W1]), 2);
        assert_eq!(pos(&[b(1), e(1), EOP, b(2)]), 3);
    }

    #[test]
    fn push_rejects_grammar_violations() {
        let mut s = DecoderSequence::start();
        assert!(s.push(W1).is_err());
        s.push(b(3)).unwrap();
        assert!(s.push(b(4)).is_err());
        assert!(s.push(EOP).is_err());
        assert!(s.push(e(2)).is_err());
        s.push(e(3)).unwrap();
        assert!(s.push(b(3)).is_err());
        s.push(EOP).unwrap();
        assert!(s.push(b(1)).is_err());
    }

    fn paragraph_strategy() -> impl Strategy<Value = Paragraph> {
        proptest::collection::vec(proptest::collection::vec(24usize..60, 1..6), 1..=4)
            .prop_map(|sentences| Paragraph::new(vec![24], sentences).unwrap())
    }

    proptest! {
        #[test]
        fn build_parse_round_trip_for_every_order(p in paragraph_strategy()) {
            let mut bodies: Option<Vec<usize>> = None;
            for order in enumerate_orders(p.num_sentences()).unwrap() {
                let seq = build_decoder_sequence(&p, &order).unwrap();
                prop_assert_eq!(seq.len(), 2 + p.sentences.iter().map(|s| s.len() + 2).sum::<usize>());
                prop_assert_eq!(seq.tokens.len(), seq.global_pos.len());
                prop_assert_eq!(seq.tokens.len(), seq.local_pos.len());
                for span in &seq.segment_spans {
                    for i in span.start..span.end {
                        prop_assert_eq!(seq.global_pos[i], span.index);
                        prop_assert_eq!(seq.local_pos[i], i - span.start + 1);
                    }
                }
                let parsed = parse_and_reorder(&seq.tokens).unwrap();
                prop_assert_eq!(parsed.bodies(), p.sentences.clone());
                prop_assert_eq!(parsed.order, order.order().to_vec());

                let mut multiset: Vec<usize> = seq.tokens.iter().copied().filter(|&t| corpus::is_content(t)).collect();
                multiset.sort();
                match &bodies {
                    None => bodies = Some(multiset),
                    Some(b) => prop_assert_eq!(b, &multiset),
                }
            }
        }
    }
}
