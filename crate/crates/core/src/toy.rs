//! Templated synthetic corpora used as hermetic fixtures.
//!
//! Two generators live here. [`overfit_corpus`] returns eight short
//! three-sentence paragraphs whose content is fully determined by the
//! keywords, for memorization tests. [`story_corpus`] produces templated
//! stories whose keywords fix some slots while three hidden slots (a name, a
//! place, an object) are drawn from a fixed joint distribution. The joint is
//! skewed so that the most likely value of each hidden slot, taken on its
//! own, points at a different story; which sentence gets written first
//! therefore decides the whole story.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::corpus::{detokenize, TextRecord, KEYWORD_SEPARATOR};

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn keywords(items: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push(KEYWORD_SEPARATOR.to_string());
        }
        out.extend(words(item));
    }
    out
}

const OVERFIT_NAMES: [&str; 8] = [
    "anna", "ben", "carl", "dora", "emma", "finn", "gina", "hugo",
];
const OVERFIT_PLACES: [&str; 8] = [
    "park", "lake", "beach", "market", "garden", "forest", "river", "school",
];
const OVERFIT_OBJECTS: [&str; 8] = [
    "kite", "ball", "book", "drum", "lamp", "cake", "boat", "hat",
];

/// Eight three-sentence paragraphs, at most six tokens per sentence and 32
/// distinct words. Every sentence is a function of the keywords.
pub fn overfit_corpus() -> Vec<TextRecord> {
    (0..8)
        .map(|i| {
            let (n, p, o) = (OVERFIT_NAMES[i], OVERFIT_PLACES[i], OVERFIT_OBJECTS[i]);
            TextRecord {
                source: keywords(&[n, p, o]),
                sentences: vec![
                    words(&format!("{n} went to the {p} .")),
                    words(&format!("the {p} had a {o} .")),
                    words(&format!("{n} liked the {o} .")),
                ],
            }
        })
        .collect()
}

const DAYS: [&str; 7] = [
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
];
const TIMES: [&str; 3] = ["morning", "afternoon", "evening"];
const WEATHER: [&str; 4] = ["sunny", "rainy", "windy", "cold"];
const MOODS: [&str; 2] = ["happy", "calm"];
const NAMES: [&str; 6] = ["anna", "ben", "carl", "dora", "emma", "finn"];
const PLACES: [&str; 6] = ["park", "lake", "beach", "market", "garden", "forest"];
const OBJECTS: [&str; 6] = ["kite", "ball", "book", "drum", "lamp", "cake"];
const ADJECTIVES: [&str; 4] = ["red", "blue", "green", "small"];

/// Hidden (name, place, object) configurations with relative weights.
///
/// The first three are the stories; config 0 is the single most likely one.
/// The rest are decoys that lift one slot value each: name 0, place 1 and
/// object 2 become the likeliest values of their slots, and each leads back
/// to a different story (0, 1 and 2 respectively).
pub const STORY_CONFIGS: [([usize; 3], u32); 12] = [
    ([0, 0, 0], 5),
    ([1, 1, 1], 3),
    ([2, 2, 2], 3),
    ([0, 3, 3], 1),
    ([0, 4, 4], 1),
    ([0, 5, 5], 1),
    ([3, 1, 4], 1),
    ([4, 1, 5], 1),
    ([5, 1, 3], 1),
    ([3, 5, 2], 1),
    ([4, 3, 2], 1),
    ([5, 4, 2], 1),
];

/// Options for [`story_corpus`].
#[derive(Clone, Debug)]
pub struct StoryOptions {
    pub train: usize,
    pub heldout: usize,
    pub seed: u64,
    /// Adds up to two keyword-driven closing sentences, giving 3 to 5
    /// sentences per paragraph.
    pub extra_sentences: bool,
}

impl Default for StoryOptions {
    fn default() -> Self {
        StoryOptions {
            train: 200,
            heldout: 24,
            seed: 0,
            extra_sentences: false,
        }
    }
}

/// Training paragraphs plus held-out paragraphs whose keyword combinations
/// never occur in training.
#[derive(Clone, Debug)]
pub struct StoryCorpus {
    pub train: Vec<TextRecord>,
    pub heldout: Vec<TextRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Keys {
    day: usize,
    time: usize,
    weather: usize,
    /// 0 = none, 1 = mood sentence, 2 = mood and closing sentence.
    extra: usize,
    mood: usize,
}

fn story(keys: Keys, config: [usize; 3], adjective: usize) -> TextRecord {
    let (day, time, weather) = (DAYS[keys.day], TIMES[keys.time], WEATHER[keys.weather]);
    let (name, place, object) = (NAMES[config[0]], PLACES[config[1]], OBJECTS[config[2]]);
    let mut kw = vec![day, time, weather];
    let mut sentences = vec![
        words(&format!("on {day} {name} woke up early .")),
        words(&format!("the {place} was {weather} that {time} .")),
        words(&format!(
            "a {} {object} was waiting there .",
            ADJECTIVES[adjective]
        )),
    ];
    if keys.extra >= 1 {
        kw.push(MOODS[keys.mood]);
        sentences.push(words(&format!("everyone felt {} .", MOODS[keys.mood])));
    }
    if keys.extra >= 2 {
        kw.push("home");
        sentences.push(words("then it was time to go home ."));
    }
    TextRecord {
        source: keywords(&kw),
        sentences,
    }
}

/// One block of the joint: every configuration repeated by its weight, each
/// with an adjective cycling through the adjective list.
fn config_block() -> Vec<([usize; 3], usize)> {
    let mut out = Vec::new();
    for &(config, weight) in &STORY_CONFIGS {
        for j in 0..weight as usize {
            out.push((config, j % ADJECTIVES.len()));
        }
    }
    out
}

/// Size of one block of the joint.
pub fn block_size() -> usize {
    STORY_CONFIGS.iter().map(|c| c.1 as usize).sum()
}

/// Builds the story corpus.
///
/// Training uses few distinct keyword combinations, each with one full
/// block of the joint (the last block may be cut short), so within every
/// training input the hidden slots follow [`STORY_CONFIGS`] exactly and the
/// keywords carry no information about them. Training combinations are
/// staggered so every keyword value occurs. Held-out paragraphs use other
/// combinations and cycle through the configurations.
pub fn story_corpus(opts: &StoryOptions) -> StoryCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let tails: Vec<(usize, usize)> = if opts.extra_sentences {
        vec![(0, 0), (1, 0), (1, 1), (2, 0), (2, 1)]
    } else {
        vec![(0, 0)]
    };
    let key = |day, time, weather, tail: (usize, usize)| Keys {
        day,
        time,
        weather,
        extra: tail.0,
        mood: tail.1,
    };
    let block = block_size();
    let n_inputs = opts.train.div_ceil(block).max(1);
    let train_keys: Vec<Keys> = (0..n_inputs)
        .map(|j| {
            key(
                j % DAYS.len(),
                j % TIMES.len(),
                j % WEATHER.len(),
                tails[j % tails.len()],
            )
        })
        .collect();

    let mut others = Vec::new();
    for day in 0..DAYS.len() {
        for time in 0..TIMES.len() {
            for weather in 0..WEATHER.len() {
                for &tail in &tails {
                    let k = key(day, time, weather, tail);
                    if !train_keys.contains(&k) {
                        others.push(k);
                    }
                }
            }
        }
    }
    others.shuffle(&mut rng);
    others.truncate(opts.heldout);

    let mut train = Vec::with_capacity(opts.train);
    for &keys in &train_keys {
        let mut b = config_block();
        b.shuffle(&mut rng);
        b.truncate(opts.train - train.len());
        train.extend(b.into_iter().map(|(config, adj)| story(keys, config, adj)));
    }
    train.shuffle(&mut rng);

    let heldout = others
        .iter()
        .enumerate()
        .map(|(i, &keys)| {
            let (config, _) = STORY_CONFIGS[i % STORY_CONFIGS.len()];
            story(keys, config, i % ADJECTIVES.len())
        })
        .collect();
    StoryCorpus { train, heldout }
}

/// One JSONL line in the corpus file format.
pub fn to_jsonl_line(record: &TextRecord) -> String {
    let sentences: Vec<String> = record.sentences.iter().map(|s| detokenize(s)).collect();
    json!({ "input": detokenize(&record.source), "sentences": sentences }).to_string()
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet, HashSet};
    use std::path::Path;

    use super::*;
    use crate::corpus::parse_jsonl;

    fn vocab(records: &[TextRecord]) -> BTreeSet<String> {
        records
            .iter()
            .flat_map(|r| r.source.iter().chain(r.sentences.iter().flatten()))
            .cloned()
            .collect()
    }

    #[test]
    fn overfit_fixture_shape() {
        let c = overfit_corpus();
        assert_eq!(c.len(), 8);
        for r in &c {
            assert_eq!(r.sentences.len(), 3);
            assert!(r.sentences.iter().all(|s| s.len() <= 6));
        }
        assert!(vocab(&c).len() <= 60);
        let sources: HashSet<_> = c.iter().map(|r| r.source.clone()).collect();
        assert_eq!(sources.len(), 8);
    }

    #[test]
    fn every_training_input_sees_the_exact_joint() {
        let c = story_corpus(&StoryOptions::default());
        assert_eq!(block_size(), 20);
        let mut per_input: BTreeMap<Vec<String>, BTreeMap<Vec<String>, usize>> = BTreeMap::new();
        for r in &c.train {
            let slots = vec![
                r.sentences[0][2].clone(),
                r.sentences[1][1].clone(),
                r.sentences[2][2].clone(),
            ];
            *per_input
                .entry(r.source.clone())
                .or_default()
                .entry(slots)
                .or_default() += 1;
        }
        assert_eq!(per_input.len(), 10);
        for counts in per_input.values() {
            let mut got: Vec<usize> = counts.values().copied().collect();
            got.sort_unstable();
            let mut want: Vec<usize> = STORY_CONFIGS.iter().map(|c| c.1 as usize).collect();
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }

    // The skew that makes the first-written sentence decide the story.
    #[test]
    fn hidden_slot_marginals_disagree() {
        let argmax_slot = |slot: usize| {
            let mut m: BTreeMap<usize, u32> = BTreeMap::new();
            for (c, w) in STORY_CONFIGS {
                *m.entry(c[slot]).or_default() += w;
            }
            m.into_iter().max_by_key(|&(_, w)| w).unwrap().0
        };
        let best_given = |slot: usize, value: usize| {
            STORY_CONFIGS
                .iter()
                .filter(|(c, _)| c[slot] == value)
                .max_by_key(|(_, w)| *w)
                .unwrap()
                .0
        };
        let chosen: Vec<[usize; 3]> = (0..3).map(|s| best_given(s, argmax_slot(s))).collect();
        assert_eq!(chosen, vec![[0, 0, 0], [1, 1, 1], [2, 2, 2]]);
    }

    #[test]
    fn story_corpus_is_deterministic_and_heldout_is_unseen() {
        let opts = StoryOptions::default();
        let a = story_corpus(&opts);
        let b = story_corpus(&opts);
        assert_eq!(a.train, b.train);
        assert_eq!(a.train.len(), 200);
        assert_eq!(a.heldout.len(), 24);
        let seen: HashSet<_> = a.train.iter().map(|r| r.source.clone()).collect();
        assert!(a.heldout.iter().all(|r| !seen.contains(&r.source)));
        assert!(a.train.iter().all(|r| r.sentences.len() == 3));
        assert!(vocab(&a.train).len() <= 60);
    }

    #[test]
    fn extra_sentences_give_three_to_five() {
        let c = story_corpus(&StoryOptions {
            extra_sentences: true,
            ..StoryOptions::default()
        });
        let lens: BTreeSet<usize> = c.train.iter().map(|r| r.sentences.len()).collect();
        assert_eq!(lens, BTreeSet::from([3, 4, 5]));
        let mut all = c.train.clone();
        all.extend(c.heldout.clone());
        assert!(vocab(&all).len() <= 60, "{}", vocab(&all).len());
    }

    #[test]
    fn jsonl_round_trip() {
        let c = story_corpus(&StoryOptions {
            extra_sentences: true,
            ..StoryOptions::default()
        });
        let text: String = c.train.iter().map(|r| to_jsonl_line(r) + "\n").collect();
        let parsed = parse_jsonl(&text, Path::new("toy.jsonl"), true).unwrap();
        assert_eq!(parsed, c.train);
    }
}
