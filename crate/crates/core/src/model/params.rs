use indexmap::IndexMap;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named parameter tensors in a stable registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    tensors: IndexMap<String, Tensor<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) -> Result<usize> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter {name}")));
        }
        Ok(self.tensors.insert_full(name, t).0)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn at(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.tensors[i]
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct NormIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct AttnIdx {
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayerIdx {
    pub ln1: NormIdx,
    pub attn: AttnIdx,
    pub ln2: NormIdx,
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayerIdx {
    pub ln1: NormIdx,
    pub self_attn: AttnIdx,
    pub ln2: NormIdx,
    pub cross_attn: AttnIdx,
    pub ln3: NormIdx,
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

/// Store indices of every parameter the forward passes touch.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub enc_pos: usize,
    pub global_pos: usize,
    pub local_pos: usize,
    pub out_bias: usize,
    pub enc: Vec<EncLayerIdx>,
    pub enc_ln: NormIdx,
    pub dec: Vec<DecLayerIdx>,
    pub dec_ln: NormIdx,
}

const EMBEDDING_STD: f64 = 0.05;

struct Builder<'r, F> {
    store: ParamStore<F>,
    rng: Option<&'r mut dyn RngCore>,
}

impl<F: Scalar> Builder<'_, F> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<usize> {
        let mut t = Tensor::zeros(shape);
        if let Some(rng) = self.rng.as_mut() {
            let dist = Normal::new(0.0, std).expect("positive std");
            for x in t.data_mut() {
                *x = F::of(dist.sample(rng));
            }
        }
        self.store.insert(name, t)
    }

    fn filled(&mut self, name: String, shape: &[usize], value: f64) -> Result<usize> {
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|x| *x = F::of(value));
        self.store.insert(name, t)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<LinearIdx> {
        Ok(LinearIdx {
            w: self.normal(
                format!("{prefix}.weight"),
                &[fan_in, fan_out],
                1.0 / (fan_in as f64).sqrt(),
            )?,
            b: self.filled(format!("{prefix}.bias"), &[fan_out], 0.0)?,
        })
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormIdx> {
        Ok(NormIdx {
            g: self.filled(format!("{prefix}.gain"), &[d], 1.0)?,
            b: self.filled(format!("{prefix}.bias"), &[d], 0.0)?,
        })
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<AttnIdx> {
        Ok(AttnIdx {
            q: self.linear(&format!("{prefix}.q"), d, d)?,
            k: self.linear(&format!("{prefix}.k"), d, d)?,
            v: self.linear(&format!("{prefix}.v"), d, d)?,
            o: self.linear(&format!("{prefix}.o"), d, d)?,
        })
    }
}

/// Registers every parameter. Without an RNG, weights are left at zero
/// (used to recover the layout for stored parameters).
pub(crate) fn build<F: Scalar>(
    c: &ModelConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<(ParamStore<F>, Layout)> {
    let d = c.d_model;
    let mut b = Builder {
        store: ParamStore::new(),
        rng,
    };
    let tok_emb = b.normal("tok_emb".into(), &[c.vocab_size, d], EMBEDDING_STD)?;
    let enc_pos = b.normal("enc.pos".into(), &[c.max_source_len, d], EMBEDDING_STD)?;
    let global_pos = b.normal("dec.global_pos".into(), &[c.tmax + 2, d], EMBEDDING_STD)?;
    let local_pos = b.normal("dec.local_pos".into(), &[c.lmax + 1, d], EMBEDDING_STD)?;
    let mut enc = Vec::with_capacity(c.n_enc_layers);
    for i in 0..c.n_enc_layers {
        let p = format!("enc.layers.{i}");
        enc.push(EncLayerIdx {
            ln1: b.norm(&format!("{p}.ln1"), d)?,
            attn: b.attn(&format!("{p}.attn"), d)?,
            ln2: b.norm(&format!("{p}.ln2"), d)?,
            fc1: b.linear(&format!("{p}.ffn.fc1"), d, c.d_ff)?,
            fc2: b.linear(&format!("{p}.ffn.fc2"), c.d_ff, d)?,
        });
    }
    let enc_ln = b.norm("enc.ln_f", d)?;
    let mut dec = Vec::with_capacity(c.n_dec_layers);
    for i in 0..c.n_dec_layers {
        let p = format!("dec.layers.{i}");
        dec.push(DecLayerIdx {
            ln1: b.norm(&format!("{p}.ln1"), d)?,
            self_attn: b.attn(&format!("{p}.self_attn"), d)?,
            ln2: b.norm(&format!("{p}.ln2"), d)?,
            cross_attn: b.attn(&format!("{p}.cross_attn"), d)?,
            ln3: b.norm(&format!("{p}.ln3"), d)?,
            fc1: b.linear(&format!("{p}.ffn.fc1"), d, c.d_ff)?,
            fc2: b.linear(&format!("{p}.ffn.fc2"), c.d_ff, d)?,
        });
    }
    let dec_ln = b.norm("dec.ln_f", d)?;
    let out_bias = b.filled("dec.out_bias".into(), &[c.vocab_size], 0.0)?;
    Ok((
        b.store,
        Layout {
            tok_emb,
            enc_pos,
            global_pos,
            local_pos,
            out_bias,
            enc,
            enc_ln,
            dec,
            dec_ln,
        },
    ))
}

pub(crate) fn init<F: Scalar, R: Rng + ?Sized>(
    c: &ModelConfig,
    rng: &mut R,
) -> Result<(ParamStore<F>, Layout)> {
    let mut adapter = RngAdapter(rng);
    build(c, Some(&mut adapter))
}

struct RngAdapter<'a, R: ?Sized>(&'a mut R);

impl<R: Rng + ?Sized> RngCore for RngAdapter<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}
