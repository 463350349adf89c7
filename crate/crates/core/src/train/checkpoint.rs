//! Binary checkpoint files.
//!
//! Layout: `PGEN`, a little-endian `u32` version, a `u64` header length,
//! the JSON header, the tensor blobs as little-endian `f32`, and a SHA-256
//! digest of everything before it. Blob offsets in the header are relative
//! to the first blob byte. Adam moments follow the parameters in the same
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamParams, Optimizer, OptimizerKind, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGEN";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub vocab_hash: String,
    pub params: ParamStore<f32>,
    pub optimizer: Optimizer<f32>,
    /// Completed optimization steps.
    pub step: u64,
    /// Free-form provenance (for example the run-config hash).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    kind: OptimizerKind,
    adam: AdamParams,
    t: u64,
    /// Offsets of first and second moments, parallel to `tensors`.
    moments: Vec<(u64, u64)>,
}

/// The training stream for step `s` is derived from `(seed, s)`, so the
/// seed plus the step counter is the whole RNG state.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngHeader {
    seed: u64,
    next_stream: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    vocab_hash: String,
    step: u64,
    rng: RngHeader,
    optimizer: OptimizerHeader,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, vocab_hash: impl Into<String>) -> Self {
        Self {
            model_config: model.config().clone(),
            train_config: None,
            vocab_hash: vocab_hash.into(),
            params: model.params().clone(),
            optimizer: Optimizer::sgd(),
            step: 0,
            meta: serde_json::Value::Null,
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.model_config.clone(), self.params.clone())
    }

    pub fn seed(&self) -> u64 {
        self.train_config.as_ref().map_or(0, |c| c.seed)
    }

    /// Errors unless `hash` matches the vocabulary the model was trained on.
    pub fn check_vocab(&self, hash: &str) -> Result<()> {
        if self.vocab_hash != hash {
            return Err(bad(format!(
                "vocabulary hash mismatch: checkpoint has {}, vocabulary has {hash}",
                self.vocab_hash
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs: Vec<u8> = Vec::new();
        let mut push = |data: &[f32]| {
            let off = blobs.len() as u64;
            blobs.extend(data.iter().flat_map(|x| x.to_le_bytes()));
            off
        };
        let tensors: Vec<TensorEntry> = self
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: push(t.data()),
            })
            .collect();
        let opt = &self.optimizer;
        let moments = opt
            .m
            .iter()
            .zip(&opt.v)
            .map(|(m, v)| (push(m), push(v)))
            .collect();
        let header = Header {
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            step: self.step,
            rng: RngHeader {
                seed: self.seed(),
                next_stream: self.step,
            },
            optimizer: OptimizerHeader {
                kind: opt.kind,
                adam: opt.adam,
                t: opt.t,
                moments,
            },
            tensors,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + blobs.len() + DIGEST_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + DIGEST_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let actual = Sha256::digest(body);
        if actual.as_slice() != digest {
            return Err(bad(format!(
                "checksum mismatch: stored {}, computed {}",
                hex::encode(digest),
                hex::encode(actual)
            )));
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let blob_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("header length runs past the end of the file"))?;
        let header: Header = serde_json::from_slice(&body[16..blob_start])
            .map_err(|e| bad(format!("malformed header: {e}")))?;
        let blobs = &body[blob_start..];
        let read = |offset: u64, n: usize| -> Result<Vec<f32>> {
            let start = offset as usize;
            let end = start
                .checked_add(n * 4)
                .filter(|&e| e <= blobs.len())
                .ok_or_else(|| bad(format!("blob at offset {offset} runs past the end")))?;
            Ok(blobs[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect())
        };
        let mut params = ParamStore::new();
        for e in &header.tensors {
            let n = e.shape.iter().product();
            let t = Tensor::new(e.shape.clone(), read(e.offset, n)?)
                .map_err(|err| bad(format!("tensor {}: {err}", e.name)))?;
            params.insert(e.name.clone(), t)?;
        }
        let oh = &header.optimizer;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        if !oh.moments.is_empty() {
            if oh.moments.len() != header.tensors.len() {
                return Err(bad("optimizer moments do not match the tensor list"));
            }
            for (e, &(mo, vo)) in header.tensors.iter().zip(&oh.moments) {
                let n = e.shape.iter().product();
                m.push(read(mo, n)?);
                v.push(read(vo, n)?);
            }
        }
        let ckpt = Self {
            model_config: header.model,
            train_config: header.train,
            vocab_hash: header.vocab_hash,
            params,
            optimizer: Optimizer {
                kind: oh.kind,
                adam: oh.adam,
                t: oh.t,
                m,
                v,
            },
            step: header.step,
            meta: header.meta,
        };
        // Validates names and shapes against the configured architecture.
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

impl Trainer<f32> {
    pub fn checkpoint(&self, vocab_hash: impl Into<String>, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: Some(self.config.clone()),
            vocab_hash: vocab_hash.into(),
            params: self.model.params().clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            meta,
        }
    }

    /// Continues a run. `config` may raise `max_steps` but must otherwise
    /// agree with the optimizer stored in the checkpoint.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if ckpt.optimizer.kind != config.optimizer {
            return Err(Error::Config(format!(
                "checkpoint was trained with {:?}, config asks for {:?}",
                ckpt.optimizer.kind, config.optimizer
            )));
        }
        let model = ckpt.model()?;
        let mut optimizer = ckpt.optimizer.clone();
        if optimizer.kind == OptimizerKind::Adam && optimizer.m.is_empty() {
            optimizer = Optimizer::adam(config.adam_params(), model.params());
        }
        Ok(Self {
            model,
            optimizer,
            config,
            step: ckpt.step,
        })
    }
}
