use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use log::{info, warn};
use permgen::corpus::{load_jsonl, Paragraph, TextRecord, Vocabulary};
use permgen::model::Model;
use permgen::sequence::{sample_order, Permutation};
use permgen::train::{paragraph_nll, Checkpoint, Trainer};
use permgen::Error;
use serde_json::{json, Value};

use crate::config::{ConfigArgs, RunConfig};
use crate::io_err;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training corpus (JSONL with `input` and `sentences`).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Dev corpus; without it the tail of the training corpus is held out.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Output directory for checkpoint, vocabulary, config and log.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint; its vocabulary must sit next to it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.pgen";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.json";

fn split_dev(mut records: Vec<TextRecord>, fraction: f64) -> (Vec<TextRecord>, Vec<TextRecord>) {
    let n_dev = (records.len() as f64 * fraction).round() as usize;
    let n_dev = n_dev.min(records.len().saturating_sub(1));
    let dev = records.split_off(records.len() - n_dev);
    (records, dev)
}

/// Dev set with one fixed order per paragraph, so evaluations are comparable.
struct DevSet {
    items: Vec<(Paragraph, Permutation)>,
}

impl DevSet {
    fn new(paragraphs: Vec<Paragraph>, cfg: &RunConfig) -> Result<Self> {
        let mut rng = cfg.train.step_rng(u64::MAX - 1);
        let items = paragraphs
            .into_iter()
            .map(|p| {
                let order = sample_order(p.num_sentences(), &mut rng)?;
                Ok((p, order))
            })
            .collect::<Result<_, Error>>()?;
        Ok(Self { items })
    }

    fn nll(&self, model: &Model<f32>) -> Result<Option<f64>> {
        if self.items.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for (p, order) in &self.items {
            total += paragraph_nll(model, p, order)? as f64;
        }
        Ok(Some(total / self.items.len() as f64))
    }
}

fn paragraphs(vocab: &Vocabulary, records: &[TextRecord]) -> Result<Vec<Paragraph>> {
    Ok(records
        .iter()
        .map(|r| vocab.paragraph(r))
        .collect::<Result<_, Error>>()?)
}

struct JsonLog<'a> {
    out: BufWriter<File>,
    path: &'a Path,
}

impl JsonLog<'_> {
    fn write(&mut self, line: Value) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| io_err(self.path, e))?;
        Ok(())
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    let records = load_jsonl(&args.corpus)?;
    let (train_records, dev_records) = match &args.dev {
        Some(path) => (records, load_jsonl(path)?),
        None => split_dev(records, cfg.run.dev_fraction),
    };

    let (vocab, resumed) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let vocab = Vocabulary::load(&sibling(path, VOCAB_FILE))?;
            ckpt.check_vocab(&vocab.hash())?;
            (vocab, Some(ckpt))
        }
        None => (Vocabulary::build(&train_records, cfg.run.min_freq)?, None),
    };
    match &resumed {
        Some(ckpt) => cfg.model = ckpt.model_config.clone(),
        None if cfg.model.vocab_size != 0 && cfg.model.vocab_size != vocab.len() => {
            return Err(Error::Config(format!(
                "model.vocab_size is {} but the corpus vocabulary has {} entries",
                cfg.model.vocab_size,
                vocab.len()
            ))
            .into());
        }
        None => cfg.model.vocab_size = vocab.len(),
    }
    cfg.validate(true)?;
    let hash = cfg.hash();
    let flat = cfg.to_flat();

    let train_set = paragraphs(&vocab, &train_records)?;
    let dev = DevSet::new(paragraphs(&vocab, &dev_records)?, &cfg)?;
    if dev.items.is_empty() {
        warn!("no dev paragraphs; dev NLL is not reported");
    }
    info!(
        "config {hash}: {} training and {} dev paragraphs, vocabulary of {}",
        train_set.len(),
        dev.items.len(),
        vocab.len()
    );

    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let vocab_path = args.out.join(VOCAB_FILE);
    vocab.save(&vocab_path)?;
    let config_path = args.out.join(CONFIG_FILE);
    let config_json = json!({ "config_hash": hash, "config": flat });
    fs::write(
        &config_path,
        serde_json::to_string_pretty(&config_json)? + "\n",
    )
    .map_err(|e| io_err(&config_path, e))?;

    let mut trainer = match &resumed {
        Some(ckpt) => Trainer::resume(ckpt, cfg.train.clone())?,
        None => {
            let model = Model::<f32>::new(cfg.model.clone(), &mut cfg.train.init_rng())?;
            Trainer::new(model, cfg.train.clone())?
        }
    };

    let log_path = args.out.join(LOG_FILE);
    let file = if resumed.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| io_err(&log_path, e))?;
    let mut log = JsonLog {
        out: BufWriter::new(file),
        path: &log_path,
    };

    let vocab_hash = vocab.hash();
    let save = |trainer: &Trainer<f32>, path: &Path, dev_nll: Option<f64>| -> Result<()> {
        let meta = json!({ "config_hash": hash, "config": flat, "dev_nll": dev_nll });
        trainer.checkpoint(vocab_hash.clone(), meta).save(path)?;
        Ok(())
    };
    let eval_line = |step: u64, nll: Option<f64>| json!({ "event": "eval", "step": step, "dev_nll": nll, "config_hash": hash });

    let initial = dev.nll(trainer.model())?;
    log.write(eval_line(trainer.step(), initial))?;
    let run = &cfg.run;
    let mut last = initial;
    let mut last_eval_step = trainer.step();
    while !trainer.is_done() {
        let report = trainer.train_step(&train_set)?;
        let step = trainer.step();
        if step % run.log_every == 0 {
            info!("step {step}: loss {:.4}, lr {:.2e}", report.loss, report.lr);
            log.write(json!({
                "event": "step",
                "step": step,
                "loss": report.loss,
                "lr": report.lr,
                "grad_norm": report.grad_norm,
                "orders": report.pi_sample,
                "config_hash": hash,
            }))?;
        }
        if run.eval_every > 0 && step % run.eval_every == 0 {
            last = dev.nll(trainer.model())?;
            last_eval_step = step;
            log.write(eval_line(step, last))?;
        }
        if run.checkpoint_every > 0 && step % run.checkpoint_every == 0 {
            save(
                &trainer,
                &args.out.join(format!("checkpoint-{step}.pgen")),
                last,
            )?;
        }
    }
    if last_eval_step != trainer.step() {
        last = dev.nll(trainer.model())?;
        log.write(eval_line(trainer.step(), last))?;
    }
    log.out.flush().map_err(|e| io_err(&log_path, e))?;

    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    save(&trainer, &ckpt_path, last)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "trained to step {}; dev NLL {} -> {}; wrote {}",
        trainer.step(),
        fmt(initial),
        fmt(last),
        ckpt_path.display()
    );
    Ok(())
}
