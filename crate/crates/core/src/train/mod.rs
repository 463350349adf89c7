//! The permutation-sampled training objective and loop.
//!
//! Every step draws a batch of paragraphs with replacement and one uniform
//! sentence order per example. The loss is the mean over examples of the
//! token-averaged negative log-likelihood of the permuted decoder sequence,
//! special tokens included. All randomness for step `s` comes from a stream
//! derived from `(seed, s)`, so resuming from a checkpoint replays the same
//! draws as an uninterrupted run.

mod checkpoint;
mod likelihood;
mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Paragraph;
use crate::error::{Error, Result};
use crate::model::{teacher_forcing_split, Bound, Mode, Model};
use crate::sequence::{build_decoder_sequence, sample_order, Permutation};
use crate::tensor::{Scalar, Tape, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use likelihood::{
    exact_log_likelihood, jensen_bound, likelihood_report, order_log_likelihoods, LikelihoodReport,
    EXACT_LIKELIHOOD_MAX_SENTENCES,
};
pub use optim::{clip_gradients, grad_norm, AdamParams, Optimizer, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Worker threads for per-example gradients. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            base_lr: 3e-3,
            warmup_steps: 200,
            max_steps: 5000,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("train.base_lr must be positive");
        }
        if self.max_steps == 0 {
            return bad("train.max_steps must be positive");
        }
        if self.warmup_steps > self.max_steps {
            return Err(Error::Config(format!(
                "train.warmup_steps {} exceeds train.max_steps {}",
                self.warmup_steps, self.max_steps
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("train.eps must be positive; weight_decay and clip_norm non-negative");
        }
        if self.threads == 0 {
            return bad("train.threads must be positive");
        }
        Ok(())
    }

    pub fn adam_params(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate for 0-based step `s`: linear warmup over
    /// `warmup_steps`, then linear decay that stays positive through the
    /// last step.
    pub fn lr_at(&self, s: u64) -> f64 {
        let (w, n) = (self.warmup_steps, self.max_steps);
        if s < w {
            self.base_lr * (s + 1) as f64 / w as f64
        } else if s >= n {
            self.base_lr / (n - w).max(1) as f64
        } else {
            self.base_lr * (n - s) as f64 / (n - w) as f64
        }
    }

    /// Random stream for step `s`.
    pub fn step_rng(&self, s: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(s);
        rng
    }

    /// Random stream for parameter initialization and other one-off setup;
    /// disjoint from every step stream.
    pub fn init_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        rng
    }
}

/// One training example with the order it is decoded in.
#[derive(Clone, Debug)]
pub struct PermutedExample<'a> {
    pub index: usize,
    pub paragraph: &'a Paragraph,
    pub order: Permutation,
}

/// Draws `batch_size` paragraphs with replacement and one uniform order
/// for each, independently.
pub fn sample_batch<'a, R: Rng + ?Sized>(
    corpus: &'a [Paragraph],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<PermutedExample<'a>>> {
    if corpus.is_empty() {
        return Err(Error::Validation("empty training corpus".into()));
    }
    (0..batch_size)
        .map(|_| {
            let index = rng.random_range(0..corpus.len());
            let paragraph = &corpus[index];
            let order = sample_order(paragraph.num_sentences(), rng)?;
            Ok(PermutedExample {
                index,
                paragraph,
                order,
            })
        })
        .collect()
}

fn describe(ex: &PermutedExample<'_>) -> String {
    format!(
        "example {} in order {} (source ids {:?}, sentence ids {:?})",
        ex.index, ex.order, ex.paragraph.source, ex.paragraph.sentences
    )
}

/// Records the token-mean NLL of one permuted paragraph on `b`'s tape.
fn record_loss<'t, F: Scalar>(
    model: &Model<F>,
    b: &Bound<'t, F>,
    ex: &PermutedExample<'_>,
    mode: &mut Mode<'_>,
) -> Result<Var<'t, F>> {
    let seq = build_decoder_sequence(ex.paragraph, &ex.order)?;
    let (inputs, targets) = teacher_forcing_split(&seq);
    let memory = model.encode_on(b, &ex.paragraph.source, mode)?;
    let logits = model.decode_on(
        b,
        memory,
        &inputs.tokens,
        &inputs.global_pos,
        &inputs.local_pos,
        mode,
    )?;
    let loss = logits.cross_entropy(&targets, &vec![false; targets.len()])?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {value} for {}",
            describe(ex)
        )));
    }
    Ok(loss)
}

/// Token-mean NLL of one permuted paragraph and its gradients.
fn example_loss<F: Scalar>(
    model: &Model<F>,
    ex: &PermutedExample<'_>,
    dropout_seed: Option<u64>,
) -> Result<(F, Vec<Vec<F>>)> {
    let tape = Tape::new();
    let b = model.bind(&tape);
    let mut rng;
    let mut mode = match dropout_seed {
        Some(s) if model.config().dropout > 0.0 => {
            rng = ChaCha8Rng::seed_from_u64(s);
            Mode::Train(&mut rng)
        }
        _ => Mode::Eval,
    };
    let loss = record_loss(model, &b, ex, &mut mode)?;
    let value = loss.item();
    let mut g = tape.backward(loss)?;
    let grads = b
        .vars()
        .iter()
        .zip(model.params().iter())
        .map(|(&v, (_, t))| g.take(v).unwrap_or_else(|| vec![F::zero(); t.numel()]))
        .collect::<Vec<_>>();
    if grads.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("gradient for {}", describe(ex))));
    }
    Ok((value, grads))
}

/// Eval-mode permuted NLL: mean over examples of the token-mean NLL.
pub fn permuted_nll<F: Scalar>(model: &Model<F>, batch: &[PermutedExample<'_>]) -> Result<F> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    // One frozen binding serves the whole batch; nothing is differentiated.
    let tape = Tape::new();
    let b = model.bind_frozen(&tape);
    let mut total = F::zero();
    for ex in batch {
        total = total + record_loss(model, &b, ex, &mut Mode::Eval)?.item();
        tape.truncate(b.vars().len());
    }
    Ok(total / F::of(batch.len() as f64))
}

/// Convenience wrapper for a single paragraph and order.
pub fn paragraph_nll<F: Scalar>(model: &Model<F>, p: &Paragraph, order: &Permutation) -> Result<F> {
    permuted_nll(
        model,
        &[PermutedExample {
            index: 0,
            paragraph: p,
            order: order.clone(),
        }],
    )
}

/// Batch loss and its gradient, one tensor per parameter in store order.
///
/// Per-example gradients are summed in batch order, so the result is the
/// same for any thread count.
pub fn loss_and_grads<F: Scalar>(
    model: &Model<F>,
    batch: &[PermutedExample<'_>],
    dropout_seeds: Option<&[u64]>,
    threads: usize,
) -> Result<(F, Vec<Vec<F>>)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let seed = |i: usize| dropout_seeds.map(|s| s[i]);
    let run = |i: usize| example_loss(model, &batch[i], seed(i));
    let results: Vec<Result<(F, Vec<Vec<F>>)>> = if threads <= 1 || batch.len() == 1 {
        (0..batch.len()).map(run).collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..batch.len())
                .step_by(chunk)
                .map(|lo| {
                    let run = &run;
                    s.spawn(move || {
                        (lo..(lo + chunk).min(batch.len()))
                            .map(run)
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let scale = F::of(1.0 / batch.len() as f64);
    let mut loss = F::zero();
    let mut total: Option<Vec<Vec<F>>> = None;
    for r in results {
        let (l, g) = r?;
        loss = loss + l;
        match total.as_mut() {
            None => total = Some(g),
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(&g) {
                    a.iter_mut().zip(gi).for_each(|(x, &y)| *x = *x + y);
                }
            }
        }
    }
    let mut grads = total.expect("nonempty batch");
    grads.iter_mut().flatten().for_each(|x| *x = *x * scale);
    Ok((loss * scale, grads))
}

/// What one optimization step did; serialized as a training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Sampled order per batch example, as 1-based sentence indices.
    pub pi_sample: Vec<Vec<usize>>,
}

/// One π-SGD step: sample a batch and orders from `rng`, compute the
/// gradient of the permuted NLL, clip it and apply the optimizer.
pub fn pi_sgd_step<F: Scalar, R: Rng + ?Sized>(
    model: &mut Model<F>,
    optimizer: &mut Optimizer<F>,
    corpus: &[Paragraph],
    rng: &mut R,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepReport> {
    let batch = sample_batch(corpus, cfg.batch_size, rng)?;
    let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.next_u64()).collect();
    let (loss, mut grads) =
        loss_and_grads(model, &batch, Some(&seeds), cfg.threads).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
            other => other,
        })?;
    let norm = clip_gradients(&mut grads, cfg.clip_norm);
    let lr = cfg.lr_at(step);
    optimizer.update(model.params_mut(), &grads, lr)?;
    Ok(StepReport {
        step: step + 1,
        loss: loss.as_f64(),
        lr,
        grad_norm: norm,
        pi_sample: batch.iter().map(|e| e.order.order().to_vec()).collect(),
    })
}

/// Owns the model and optimizer state across steps.
#[derive(Clone)]
pub struct Trainer<F: Scalar> {
    model: Model<F>,
    optimizer: Optimizer<F>,
    config: TrainConfig,
    step: u64,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: Model<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer, config.adam_params(), model.params());
        Ok(Self {
            model,
            optimizer,
            config,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model<F> {
        &self.model
    }

    pub fn into_model(self) -> Model<F> {
        self.model
    }

    pub fn optimizer(&self) -> &Optimizer<F> {
        &self.optimizer
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.max_steps
    }

    pub fn train_step(&mut self, corpus: &[Paragraph]) -> Result<StepReport> {
        let mut rng = self.config.step_rng(self.step);
        let report = pi_sgd_step(
            &mut self.model,
            &mut self.optimizer,
            corpus,
            &mut rng,
            &self.config,
            self.step,
        )?;
        self.step += 1;
        Ok(report)
    }

    /// Runs until `until` completed steps (capped at `max_steps`), calling
    /// `on_step` after each.
    pub fn run_until(
        &mut self,
        corpus: &[Paragraph],
        until: u64,
        mut on_step: impl FnMut(&Self, &StepReport) -> Result<()>,
    ) -> Result<()> {
        while self.step < until.min(self.config.max_steps) {
            let report = self.train_step(corpus)?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
