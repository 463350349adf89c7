use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use permgen::corpus::{load_jsonl, tokenize, TextRecord};
use permgen::metrics::{evaluate, HypothesisGroup, MetricReport, SelfBleuMode};
use permgen::Error;
use serde::Deserialize;
use serde_json::json;

use crate::config::ConfigArgs;
use crate::io_err;

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Generation JSONL written by `generate`.
    #[arg(long)]
    pub generations: PathBuf,
    /// Reference corpus aligned line by line with the generations.
    #[arg(long)]
    pub references: PathBuf,
    /// Report JSON; the table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Self-BLEU references: `pairwise` or `one_vs_rest`.
    #[arg(long, value_parser = parse_mode)]
    pub self_bleu_mode: Option<SelfBleuMode>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

fn parse_mode(s: &str) -> Result<SelfBleuMode, String> {
    serde_json::from_value(json!(s))
        .map_err(|_| format!("expected pairwise or one_vs_rest, got {s:?}"))
}

#[derive(Debug, Deserialize)]
pub struct GenCandidate {
    pub sentences: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct GenRecord {
    pub source: String,
    pub candidates: Vec<GenCandidate>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

pub fn load_generations(path: &Path) -> Result<Vec<GenRecord>, Error> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn list(ids: &[usize]) -> String {
    ids.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

/// Pairs generations with references, flattening each paragraph into one
/// token sequence with sentences in index order.
pub fn align(
    gens: &[GenRecord],
    refs: &[TextRecord],
) -> Result<Vec<HypothesisGroup<String>>, Error> {
    if gens.len() != refs.len() {
        let ids: Vec<usize> = (gens.len().min(refs.len())..gens.len().max(refs.len())).collect();
        return Err(Error::Validation(format!(
            "{} generation records but {} references; unmatched source ids: {}",
            gens.len(),
            refs.len(),
            list(&ids)
        )));
    }
    let mismatched: Vec<usize> = gens
        .iter()
        .zip(refs)
        .enumerate()
        .filter(|(_, (g, r))| tokenize(&g.source) != r.source)
        .map(|(i, _)| i)
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::Validation(format!(
            "generation sources differ from reference inputs at source ids: {}",
            list(&mismatched)
        )));
    }
    let empty: Vec<usize> = gens
        .iter()
        .enumerate()
        .filter(|(_, g)| g.candidates.is_empty())
        .map(|(i, _)| i)
        .collect();
    if !empty.is_empty() {
        return Err(Error::Validation(format!(
            "empty candidate list at source ids: {}",
            list(&empty)
        )));
    }
    Ok(gens
        .iter()
        .zip(refs)
        .map(|(g, r)| HypothesisGroup {
            hypotheses: g
                .candidates
                .iter()
                .map(|c| c.sentences.iter().flat_map(|s| tokenize(s)).collect())
                .collect(),
            reference: r.sentences.concat(),
        })
        .collect())
}

pub fn run(args: &EvaluateArgs) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    if let Some(mode) = args.self_bleu_mode {
        cfg.eval.self_bleu_mode = mode;
    }
    let gens = load_generations(&args.generations)?;
    let refs = load_jsonl(&args.references)?;
    let groups = align(&gens, &refs)?;
    let mut report: MetricReport = evaluate(&groups, &cfg.eval)?;
    let generation_hashes: BTreeSet<&str> = gens
        .iter()
        .filter_map(|g| g.config_hash.as_deref())
        .collect();
    report.config["config_hash"] = json!(cfg.hash());
    report.config["generation_config_hashes"] = json!(generation_hashes);
    if let Some(path) = &args.out {
        let text = serde_json::to_string_pretty(&report)? + "\n";
        fs::write(path, text).map_err(|e| io_err(path, e))?;
    }
    print!("{}", report.to_table());
    Ok(())
}
