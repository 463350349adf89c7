use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use permgen::corpus::TextRecord;
use permgen::toy::{overfit_corpus, story_corpus, to_jsonl_line, StoryOptions};

use crate::io_err;

#[derive(Args, Debug)]
pub struct ToyArgs {
    /// Output directory; receives `train.jsonl` and `heldout.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 24)]
    pub heldout: usize,
    /// Keep every paragraph at three sentences.
    #[arg(long)]
    pub three_sentences: bool,
    /// Write the eight-paragraph memorization fixture instead.
    #[arg(long, conflicts_with_all = ["train", "heldout", "three_sentences"])]
    pub overfit: bool,
}

fn write(path: &Path, records: &[TextRecord]) -> Result<()> {
    let text: String = records.iter().map(|r| to_jsonl_line(r) + "\n").collect();
    fs::write(path, text).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn run(args: &ToyArgs) -> Result<()> {
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let train_path = args.out.join("train.jsonl");
    if args.overfit {
        let corpus = overfit_corpus();
        write(&train_path, &corpus)?;
        println!(
            "wrote {} paragraphs to {}",
            corpus.len(),
            train_path.display()
        );
        return Ok(());
    }
    let corpus = story_corpus(&StoryOptions {
        train: args.train,
        heldout: args.heldout,
        seed: args.seed,
        extra_sentences: !args.three_sentences,
    });
    let heldout_path = args.out.join("heldout.jsonl");
    write(&train_path, &corpus.train)?;
    write(&heldout_path, &corpus.heldout)?;
    println!(
        "wrote {} paragraphs to {} and {} to {}",
        corpus.train.len(),
        train_path.display(),
        corpus.heldout.len(),
        heldout_path.display()
    );
    Ok(())
}
