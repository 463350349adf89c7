//! Run configuration: one JSON file of flat `section.field` keys, with
//! command-line overrides on top.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use permgen::decode::{DecodeConfig, StrategyKind};
use permgen::metrics::EvalOptions;
use permgen::model::ModelConfig;
use permgen::train::TrainConfig;
use permgen::Error;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// Knobs that belong to the command driver rather than a library module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    /// Vocabulary cutoff when building from the training corpus.
    pub min_freq: usize,
    /// Steps between training-log lines.
    pub log_every: u64,
    /// Steps between dev-set evaluations; 0 evaluates only at start and end.
    pub eval_every: u64,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Tail fraction of the corpus held out as dev set when `--dev` is absent.
    pub dev_fraction: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            min_freq: 1,
            log_every: 10,
            eval_every: 100,
            checkpoint_every: 0,
            dev_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalOptions,
    pub run: RunOptions,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    /// Applies flat `section.field` keys on top of the defaults. Unknown
    /// keys and nested objects are rejected.
    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self, Error> {
        let mut tree = serde_json::to_value(Self::default()).expect("config serializes");
        for (key, value) in flat {
            let (section, field) = key.split_once('.').ok_or_else(|| {
                config_err(format!(
                    "config key {key:?} is not of the form section.field"
                ))
            })?;
            let slot = tree
                .get_mut(section)
                .and_then(|s| s.get_mut(field))
                .ok_or_else(|| config_err(format!("unknown config key {key:?}")))?;
            *slot = value.clone();
        }
        serde_json::from_value(tree).map_err(|e| config_err(format!("bad config value: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let Value::Object(flat) = value else {
            return Err(config_err(format!(
                "{}: expected a JSON object of section.field keys",
                path.display()
            )));
        };
        Self::from_flat(&flat)
    }

    /// Flat `section.field` view, sorted by key.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut out = BTreeMap::new();
        if let Value::Object(sections) = tree {
            for (section, fields) in sections {
                if let Value::Object(fields) = fields {
                    for (field, v) in fields {
                        out.insert(format!("{section}.{field}"), v);
                    }
                }
            }
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of the flat view.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.to_flat()).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
    }

    /// Validates every section; `vocab_size` is only checked once known.
    pub fn validate(&self, vocab_known: bool) -> Result<(), Error> {
        if vocab_known {
            self.model.validate()?;
        } else {
            ModelConfig {
                vocab_size: 1,
                ..self.model.clone()
            }
            .validate()?;
        }
        self.train.validate()?;
        self.decode.validate()?;
        let r = &self.run;
        if r.min_freq == 0 || r.log_every == 0 {
            return Err(config_err(
                "run.min_freq and run.log_every must be positive",
            ));
        }
        if !(0.0..1.0).contains(&r.dev_fraction) {
            return Err(config_err("run.dev_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Config file and the flags that override it.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// JSON file of flat `section.field` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sets both `train.seed` and `decode.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sets both `train.threads` and `decode.threads`; 1 is bit-reproducible.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Number of candidates per input.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<StrategyKind>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub top_p: Option<f64>,
    /// Comma-separated sentence order, for example `2,1,3`.
    #[arg(long, value_delimiter = ',')]
    pub force_order: Option<Vec<usize>>,
    /// Draw first sentence indices uniformly instead of from the model.
    #[arg(long)]
    pub uniform_first: bool,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.decode.seed = seed;
        }
        if let Some(threads) = self.threads {
            cfg.train.threads = threads;
            cfg.decode.threads = threads;
        }
        let d = &mut cfg.decode;
        if let Some(k) = self.k {
            d.num_candidates = k;
        }
        if let Some(s) = self.strategy {
            d.strategy = s;
        }
        if let Some(w) = self.beam_width {
            d.beam_width = w;
        }
        if let Some(k) = self.top_k {
            d.top_k = k;
        }
        if let Some(p) = self.top_p {
            d.top_p = p;
        }
        if let Some(order) = &self.force_order {
            d.force_order = Some(order.clone());
        }
        if self.uniform_first {
            d.uniform_first = true;
        }
        if let Some(n) = self.max_steps {
            cfg.train.max_steps = n;
        }
        cfg.validate(false)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    fn flat(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn flat_keys_round_trip() {
        let cfg = RunConfig::from_flat(&flat(json!({
            "model.d_model": 32,
            "train.max_steps": 7,
            "decode.force_order": [2, 1],
            "eval.self_bleu_mode": "one_vs_rest",
        })))
        .unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.train.max_steps, 7);
        assert_eq!(cfg.decode.force_order, Some(vec![2, 1]));
        let back: Map<String, Value> = cfg.to_flat().into_iter().collect();
        assert_eq!(RunConfig::from_flat(&back).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_nested_keys_are_rejected() {
        for bad in [
            json!({"model.depth": 3}),
            json!({"optimizer.lr": 0.1}),
            json!({"model": {"d_model": 8}}),
            json!({"train.max_steps": "many"}),
        ] {
            assert!(matches!(
                RunConfig::from_flat(&flat(bad)),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.decode.seed = 9;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train.seed": 4, "decode.num_candidates": 2}"#).unwrap();
        let args = ConfigArgs {
            config: Some(path),
            seed: Some(11),
            k: Some(5),
            force_order: Some(vec![1, 2]),
            ..ConfigArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!((cfg.train.seed, cfg.decode.seed), (11, 11));
        assert_eq!(cfg.decode.num_candidates, 5);
        assert_eq!(cfg.decode.force_order, Some(vec![1, 2]));
    }
}
