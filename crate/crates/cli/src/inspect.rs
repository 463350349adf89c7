use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Subcommand};
use permgen::corpus::{load_jsonl, tokenize, TextRecord, Vocabulary};
use permgen::sequence::{build_decoder_sequence, DecoderSequence, Permutation};
use permgen::train::Checkpoint;
use permgen::Error;

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(subcommand)]
    pub what: InspectCommand,
}

#[derive(Subcommand, Debug)]
pub enum InspectCommand {
    /// Parameter names, shapes and norms of a checkpoint.
    Checkpoint { path: PathBuf },
    /// Tokens of a decoder sequence with their global and local positions.
    Sequence(SequenceArgs),
}

#[derive(Args, Debug)]
pub struct SequenceArgs {
    /// A sentence; repeat for each sentence in index order.
    #[arg(long = "sentence", conflicts_with = "corpus")]
    pub sentences: Vec<String>,
    /// Take the paragraph from this corpus instead.
    #[arg(long, requires = "record")]
    pub corpus: Option<PathBuf>,
    /// 1-based record number in `--corpus`.
    #[arg(long)]
    pub record: Option<usize>,
    /// Comma-separated order; identity when absent.
    #[arg(long, value_delimiter = ',')]
    pub order: Option<Vec<usize>>,
}

pub fn checkpoint_dump(ckpt: &Checkpoint) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "step {}  vocab hash {}  config hash {}\n",
        ckpt.step,
        ckpt.vocab_hash,
        ckpt.meta
            .get("config_hash")
            .and_then(|v| v.as_str())
            .unwrap_or("n/a")
    ));
    out.push_str(&format!(
        "model: {}\n",
        serde_json::to_string(&ckpt.model_config).expect("config serializes")
    ));
    let width = ckpt.params.names().map(str::len).max().unwrap_or(4).max(4);
    out.push_str(&format!(
        "{:<width$}  {:<12}  {:>8}  {:>10}\n",
        "name", "shape", "numel", "l2"
    ));
    for (name, t) in ckpt.params.iter() {
        let shape = format!("{:?}", t.shape());
        let norm = t
            .data()
            .iter()
            .map(|&x| x as f64 * x as f64)
            .sum::<f64>()
            .sqrt();
        out.push_str(&format!(
            "{name:<width$}  {shape:<12}  {:>8}  {norm:>10.4}\n",
            t.numel()
        ));
    }
    out.push_str(&format!("total parameters {}\n", ckpt.params.numel()));
    out
}

/// Three rows (token, global, local), every column padded to one width.
pub fn sequence_dump(seq: &DecoderSequence, vocab: &Vocabulary) -> String {
    let cols: Vec<[String; 3]> = seq
        .tokens
        .iter()
        .zip(&seq.global_pos)
        .zip(&seq.local_pos)
        .map(|((&t, g), l)| [vocab.token(t).to_string(), g.to_string(), l.to_string()])
        .collect();
    let labels = ["token", "global", "local"];
    let mut out = String::new();
    for (row, label) in labels.iter().enumerate() {
        let mut line = format!("{label:<6}");
        for c in &cols {
            let w = c.iter().map(String::len).max().unwrap_or(1);
            line.push_str(&format!("  {:<w$}", c[row]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn paragraph_record(args: &SequenceArgs) -> Result<TextRecord, Error> {
    if let Some(path) = &args.corpus {
        let n = args.record.unwrap_or(1);
        let records = load_jsonl(path)?;
        return records.get(n.wrapping_sub(1)).cloned().ok_or_else(|| {
            Error::Validation(format!(
                "{} has {} records; record {n} does not exist",
                path.display(),
                records.len()
            ))
        });
    }
    if args.sentences.is_empty() {
        return Err(Error::Config(
            "give --sentence at least once, or --corpus".into(),
        ));
    }
    Ok(TextRecord {
        source: vec!["-".into()],
        sentences: args.sentences.iter().map(|s| tokenize(s)).collect(),
    })
}

pub fn run(args: &InspectArgs) -> Result<()> {
    match &args.what {
        InspectCommand::Checkpoint { path } => {
            let ckpt = Checkpoint::load(path)?;
            print!("{}", checkpoint_dump(&ckpt));
        }
        InspectCommand::Sequence(seq_args) => {
            let record = paragraph_record(seq_args)?;
            let mut words: Vec<String> = Vec::new();
            for w in record.sentences.iter().flatten().chain(&record.source) {
                if !words.contains(w) {
                    words.push(w.clone());
                }
            }
            let vocab = Vocabulary::from_tokens(words)?;
            let paragraph = vocab.paragraph(&record)?;
            let order = match &seq_args.order {
                Some(o) => Permutation::new(o.clone())
                    .map_err(|e| Error::Config(format!("--order: {e}")))?,
                None => Permutation::identity(paragraph.num_sentences())?,
            };
            let seq = build_decoder_sequence(&paragraph, &order)?;
            print!("{}", sequence_dump(&seq, &vocab));
        }
    }
    Ok(())
}
