use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use log::info;
use permgen::corpus::{detokenize, load_inputs_jsonl, Vocabulary};
use permgen::decode::{decode_paragraph, DecodeOutput};
use permgen::train::Checkpoint;
use serde_json::{json, Value};

use crate::config::ConfigArgs;
use crate::io_err;
use crate::train::VOCAB_FILE;

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file; defaults to the one next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// JSONL inputs; `sentences` is optional and ignored.
    #[arg(long)]
    pub inputs: PathBuf,
    /// Output JSONL; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// One generation record. `order` is the order sentences were written in;
/// `sentences` are already sorted by index.
pub fn record_json(
    id: usize,
    source: &str,
    out: &DecodeOutput,
    vocab: &Vocabulary,
    hashes: &Value,
) -> Value {
    let candidates: Vec<Value> = out
        .candidates
        .iter()
        .map(|c| {
            let sentences: Vec<String> = c
                .sentences
                .iter()
                .map(|s| detokenize(&vocab.decode(s)))
                .collect();
            json!({
                "sentences": sentences,
                "indices": c.indices,
                "order": c.order,
                "score": c.score,
                "truncated": c.truncated,
            })
        })
        .collect();
    json!({
        "id": id,
        "source": source,
        "candidates": candidates,
        "first_indices": out.first_indices,
        "first_index_with_replacement": out.first_index_with_replacement,
        "config_hash": hashes["config_hash"],
        "checkpoint_config_hash": hashes["checkpoint_config_hash"],
    })
}

pub fn run(args: &GenerateArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let vocab_path = args.vocab.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(std::path::Path::new("."))
            .join(VOCAB_FILE)
    });
    let vocab = Vocabulary::load(&vocab_path)?;
    ckpt.check_vocab(&vocab.hash())?;
    let model = ckpt.model()?;
    cfg.model = ckpt.model_config.clone();
    cfg.train = ckpt.train_config.clone().unwrap_or(cfg.train);
    let hashes = json!({
        "config_hash": cfg.hash(),
        "checkpoint_config_hash": ckpt.meta.get("config_hash").cloned().unwrap_or(Value::Null),
    });

    let inputs = load_inputs_jsonl(&args.inputs)?;
    info!(
        "decoding {} inputs with config {}",
        inputs.len(),
        hashes["config_hash"]
    );
    let mut writer: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).map_err(|e| io_err(path, e))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let out_name = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("<stdout>"));
    for (id, rec) in inputs.iter().enumerate() {
        let source = vocab.encode(&rec.source);
        let out = decode_paragraph(&model, &source, &cfg.decode)?;
        let line = record_json(id, &detokenize(&rec.source), &out, &vocab, &hashes);
        writeln!(writer, "{line}").map_err(|e| io_err(&out_name, e))?;
    }
    writer.flush().map_err(|e| io_err(&out_name, e))?;
    Ok(())
}
