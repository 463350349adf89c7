//! Corpus ingestion: tokenization, the special-token registry, vocabulary
//! construction and JSONL loading.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Maximum number of sentences per paragraph.
pub const TMAX: usize = 10;
/// Default bound on a sentence segment's local positions, including its
/// begin/end markers.
pub const DEFAULT_LMAX: usize = 64;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const UNK: usize = 2;
pub const EOP: usize = 3;
/// Size of the reserved id prefix: four fixed tokens plus begin/end markers
/// for every sentence index.
pub const NUM_RESERVED: usize = 4 + 2 * TMAX;

/// Separator inserted between items of a list-valued `input`.
pub const KEYWORD_SEPARATOR: &str = ";";

const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '\'', '"'];

/// Id of `<B-t>` for a 1-based sentence index `t`.
pub fn begin_id(t: usize) -> usize {
    debug_assert!((1..=TMAX).contains(&t));
    3 + t
}

/// Id of `<E-t>` for a 1-based sentence index `t`.
pub fn end_id(t: usize) -> usize {
    debug_assert!((1..=TMAX).contains(&t));
    3 + TMAX + t
}

/// Sentence index carried by a `<B-t>` id.
pub fn begin_index(id: usize) -> Option<usize> {
    (4..4 + TMAX).contains(&id).then(|| id - 3)
}

/// Sentence index carried by an `<E-t>` id.
pub fn end_index(id: usize) -> Option<usize> {
    (4 + TMAX..NUM_RESERVED)
        .contains(&id)
        .then(|| id - 3 - TMAX)
}

/// True for ids that may appear inside a sentence body: ordinary words and `<UNK>`.
pub fn is_content(id: usize) -> bool {
    id == UNK || id >= NUM_RESERVED
}

fn reserved_strings() -> Vec<String> {
    let mut out: Vec<String> = ["<PAD>", "<BOS>", "<UNK>", "<EOP>"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    out.extend((1..=TMAX).map(|t| format!("<B-{t}>")));
    out.extend((1..=TMAX).map(|t| format!("<E-{t}>")));
    out
}

fn is_reserved_string(token: &str) -> bool {
    reserved_strings()
        .iter()
        .any(|r| r.eq_ignore_ascii_case(token))
}

/// Lowercases, splits on whitespace and detaches `.,!?;:'"` as standalone tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if PUNCTUATION.contains(&ch) {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lossy sentence splitter for raw text import: cuts after `.`, `?` or `!`.
/// Abbreviations and quotes are not handled.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        current.push(ch);
        if matches!(ch, '.' | '?' | '!') {
            let s = current.trim();
            if !s.is_empty() && s.chars().any(char::is_alphanumeric) {
                out.push(s.to_string());
            }
            current.clear();
        }
    }
    let rest = current.trim();
    if rest.chars().any(char::is_alphanumeric) {
        out.push(rest.to_string());
    }
    out
}

/// A tokenized example before id assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextRecord {
    pub source: Vec<String>,
    pub sentences: Vec<Vec<String>>,
}

/// An example in id space: the source `X` and the ordered sentences `Y_1..Y_T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Paragraph {
    pub source: Vec<usize>,
    pub sentences: Vec<Vec<usize>>,
}

impl Paragraph {
    pub fn new(source: Vec<usize>, sentences: Vec<Vec<usize>>) -> Result<Self> {
        let p = Self { source, sentences };
        p.validate()?;
        Ok(p)
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.sentences.len();
        if !(1..=TMAX).contains(&t) {
            return Err(Error::Validation(format!(
                "paragraph has {t} sentences; expected 1..={TMAX}"
            )));
        }
        if self.source.is_empty() {
            return Err(Error::Validation("paragraph has an empty source".into()));
        }
        if let Some(&id) = self.source.iter().find(|&&id| !is_content(id)) {
            return Err(Error::Validation(format!(
                "reserved id {id} inside the source"
            )));
        }
        for (i, s) in self.sentences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Validation(format!("sentence {} is empty", i + 1)));
            }
            if let Some(&id) = s.iter().find(|&&id| !is_content(id)) {
                return Err(Error::Validation(format!(
                    "reserved id {id} inside sentence {}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub examples: usize,
    pub mean_input_tokens: f64,
    pub mean_output_tokens: f64,
    pub mean_output_sentences: f64,
}

impl CorpusStats {
    pub fn of(records: &[TextRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let sum = |f: &dyn Fn(&TextRecord) -> usize| records.iter().map(f).sum::<usize>() as f64;
        Self {
            examples: records.len(),
            mean_input_tokens: sum(&|r| r.source.len()) / n,
            mean_output_tokens: sum(&|r| r.sentences.iter().map(Vec::len).sum()) / n,
            mean_output_sentences: sum(&|r| r.sentences.len()) / n,
        }
    }
}

/// Bidirectional token/id map whose first [`NUM_RESERVED`] ids are the
/// special-token registry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_freq` times, most frequent first with
    /// lexicographic tie-breaks.
    pub fn build<'a>(
        records: impl IntoIterator<Item = &'a TextRecord>,
        min_freq: usize,
    ) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for r in records {
            any = true;
            for tok in r.source.iter().chain(r.sentences.iter().flatten()) {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Validation(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(tok, c)| c >= min_freq && !is_reserved_string(tok))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Builds a vocabulary from normal tokens in id order; the reserved prefix
    /// is prepended.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut id_to_token = reserved_strings();
        id_to_token.extend(tokens);
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate() {
            if id >= NUM_RESERVED && is_reserved_string(tok) {
                return Err(Error::Validation(format!(
                    "reserved token string {tok:?} used as a normal token"
                )));
            }
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Validation(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.id_to_token.get(id).map_or("<UNK>", String::as_str)
    }

    pub fn normal_tokens(&self) -> &[String] {
        &self.id_to_token[NUM_RESERVED..]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn paragraph(&self, record: &TextRecord) -> Result<Paragraph> {
        Paragraph::new(
            self.encode(&record.source),
            record.sentences.iter().map(|s| self.encode(s)).collect(),
        )
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let reserved = reserved_strings();
        if lines.len() < NUM_RESERVED || lines[..NUM_RESERVED] != reserved[..] {
            return Err(Error::Validation(
                "vocabulary file does not start with the reserved token prefix".into(),
            ));
        }
        Self::from_tokens(lines[NUM_RESERVED..].iter().map(|s| s.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the persisted text form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum InputField {
    Text(String),
    Items(Vec<String>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    input: InputField,
    #[serde(default)]
    sentences: Option<Vec<String>>,
}

fn tokenize_input(input: &InputField) -> Vec<String> {
    match input {
        InputField::Text(s) => tokenize(s),
        InputField::Items(items) => {
            let mut out = Vec::new();
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(KEYWORD_SEPARATOR.to_string());
                }
                out.extend(tokenize(item));
            }
            out
        }
    }
}

/// Tokenizes an `input` JSON value (string or list of strings).
pub fn tokenize_input_value(value: &serde_json::Value) -> Result<Vec<String>> {
    let input: InputField = serde_json::from_value(value.clone())
        .map_err(|e| Error::Validation(format!("bad input field: {e}")))?;
    Ok(tokenize_input(&input))
}

fn check_tokens(tokens: &[String], path: &Path, line: usize, what: &str) -> Result<()> {
    if let Some(t) = tokens.iter().find(|t| is_reserved_string(t)) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("reserved token string {t:?} in {what}"),
        });
    }
    Ok(())
}

/// Parses JSONL text. With `require_sentences` false, records without a
/// `sentences` field are accepted and get an empty sentence list.
pub fn parse_jsonl(text: &str, path: &Path, require_sentences: bool) -> Result<Vec<TextRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let source = tokenize_input(&raw.input);
        if source.is_empty() {
            return Err(parse_err("empty input".into()));
        }
        check_tokens(&source, path, lineno, "input")?;
        let sentences = match raw.sentences {
            Some(s) => s,
            None if require_sentences => return Err(parse_err("missing field `sentences`".into())),
            None => Vec::new(),
        };
        if sentences.len() > TMAX {
            return Err(Error::Validation(format!(
                "{}:{lineno}: {} sentences exceeds the maximum of {TMAX}",
                path.display(),
                sentences.len()
            )));
        }
        if require_sentences && sentences.is_empty() {
            return Err(Error::Validation(format!(
                "{}:{lineno}: paragraph has no sentences",
                path.display()
            )));
        }
        let mut toks = Vec::with_capacity(sentences.len());
        for (si, s) in sentences.iter().enumerate() {
            let t = tokenize(s);
            if t.is_empty() {
                return Err(Error::Validation(format!(
                    "{}:{lineno}: sentence {} is empty",
                    path.display(),
                    si + 1
                )));
            }
            if t.len() + 2 > DEFAULT_LMAX {
                return Err(Error::Validation(format!(
                    "{}:{lineno}: sentence {} has {} tokens; at most {} fit the local position table",
                    path.display(),
                    si + 1,
                    t.len(),
                    DEFAULT_LMAX - 2
                )));
            }
            check_tokens(&t, path, lineno, "sentences")?;
            toks.push(t);
        }
        out.push(TextRecord {
            source,
            sentences: toks,
        });
    }
    Ok(out)
}

/// Loads a training/reference corpus: every record needs `input` and `sentences`.
pub fn load_jsonl(path: &Path) -> Result<Vec<TextRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path, true)
}

/// Loads generation inputs, where `sentences` is optional.
pub fn load_inputs_jsonl(path: &Path) -> Result<Vec<TextRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(src: &str, sents: &[&str]) -> TextRecord {
        TextRecord {
            source: tokenize(src),
            sentences: sents.iter().map(|s| tokenize(s)).collect(),
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("I started a company."),
            ["i", "started", "a", "company", "."]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A  B"), ["a", "b"]);
        assert_eq!(
            tokenize("don't \"stop\""),
            ["don", "'", "t", "\"", "stop", "\""]
        );
    }

    #[test]
    fn reserved_prefix_layout() {
        assert_eq!(NUM_RESERVED, 24);
        let v = Vocabulary::from_tokens(Vec::new()).unwrap();
        assert_eq!(v.len(), 24);
        assert_eq!(v.token(begin_id(1)), "<B-1>");
        assert_eq!(v.token(end_id(10)), "<E-10>");
        assert_eq!(begin_index(begin_id(7)), Some(7));
        assert_eq!(end_index(end_id(3)), Some(3));
        assert_eq!(begin_index(end_id(1)), None);
    }

    #[test]
    fn build_vocabulary_orders_by_frequency() {
        let corpus = [rec("a a b", &["a"])];
        let v = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v.normal_tokens(), ["a", "b"]);
        let v2 = Vocabulary::build(&corpus, 2).unwrap();
        assert_eq!(v2.normal_tokens(), ["a"]);
        assert_eq!(v2.id("b"), UNK);

        let ties = [rec("z y x", &["y"])];
        let v = Vocabulary::build(&ties, 1).unwrap();
        assert_eq!(v.normal_tokens(), ["y", "x", "z"]);
    }

    #[test]
    fn build_vocabulary_errors() {
        let empty: [TextRecord; 0] = [];
        assert!(Vocabulary::build(&empty, 1).is_err());
        assert!(Vocabulary::build(&[rec("a", &["a"])], 0).is_err());
    }

    #[test]
    fn vocabulary_text_round_trip_and_hash() {
        let v = Vocabulary::build(&[rec("x y ; z", &["w ."])], 1).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.hash(), back.hash());
        let other = Vocabulary::build(&[rec("x y", &["w ."])], 1).unwrap();
        assert_ne!(v.hash(), other.hash());
    }

    #[test]
    fn load_jsonl_examples() {
        let p = Path::new("mem.jsonl");
        let recs = parse_jsonl(
            r#"{"input":"mounting popularity","sentences":["i started a company .","it was hard ."]}"#,
            p,
            true,
        )
        .unwrap();
        assert_eq!(recs[0].sentences.len(), 2);
        assert_eq!(recs[0].source, ["mounting", "popularity"]);

        let recs = parse_jsonl(r#"{"input":["a","b c"],"sentences":["x"]}"#, p, true).unwrap();
        assert_eq!(recs[0].source, ["a", ";", "b", "c"]);

        let eleven: Vec<String> = (0..11).map(|i| format!("\"s{i}\"")).collect();
        let line = format!("{{\"input\":\"a\",\"sentences\":[{}]}}", eleven.join(","));
        let text = format!("{{\"input\":\"a\",\"sentences\":[\"b\"]}}\n{line}");
        let err = parse_jsonl(&text, p, true).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn load_jsonl_rejects_bad_lines() {
        let p = Path::new("mem.jsonl");
        let err =
            parse_jsonl("{\"input\":\"a\",\"sentences\":[\"b\"]}\n{oops", p, true).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_jsonl(r#"{"input":"a"}"#, p, true).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_jsonl(r#"{"input":"a","sentences":["b <B-3> c"]}"#, p, true).unwrap_err();
        assert!(err.to_string().contains("reserved"), "{err}");
        let err = parse_jsonl(r#"{"input":"a","sentences":["ok", "  "]}"#, p, true).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
        assert!(parse_jsonl(r#"{"input":"a"}"#, p, false).is_ok());
    }

    #[test]
    fn paragraph_validation() {
        assert!(Paragraph::new(vec![30], vec![vec![30]]).is_ok());
        assert!(Paragraph::new(vec![30], vec![]).is_err());
        assert!(Paragraph::new(vec![30], vec![vec![]]).is_err());
        assert!(Paragraph::new(vec![30], vec![vec![begin_id(2)]]).is_err());
        assert!(Paragraph::new(vec![EOP], vec![vec![30]]).is_err());
        assert!(Paragraph::new(vec![30], vec![vec![30]; 11]).is_err());
    }

    #[test]
    fn corpus_stats_means() {
        let s = CorpusStats::of(&[rec("a b", &["c d e", "f"]), rec("a", &["c"])]);
        assert_eq!(s.examples, 2);
        assert_eq!(s.mean_input_tokens, 1.5);
        assert_eq!(s.mean_output_tokens, 2.5);
        assert_eq!(s.mean_output_sentences, 1.5);
    }

    #[test]
    fn sentence_splitter_is_lossy_but_simple() {
        assert_eq!(
            split_sentences("It rained. We stayed in! Why? done"),
            ["It rained.", "We stayed in!", "Why?", "done"]
        );
    }

    proptest! {
        #[test]
        fn detokenize_preserves_non_whitespace(s in "[a-zA-Z .,!?;:'\"]{0,40}") {
            let round = detokenize(&tokenize(&s));
            let squash = |x: &str| x.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase();
            prop_assert_eq!(squash(&round), squash(&s));
        }

        #[test]
        fn vocabulary_build_is_deterministic(words in proptest::collection::vec("[a-e]{1,2}", 1..30)) {
            let r = TextRecord { source: words.clone(), sentences: vec![words] };
            let a = Vocabulary::build(std::slice::from_ref(&r), 1).unwrap();
            let b = Vocabulary::build(std::slice::from_ref(&r), 1).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
