use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?}; expected sgd or adam"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer with its per-parameter state. Plain SGD keeps no moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<F> {
    pub kind: OptimizerKind,
    pub adam: AdamParams,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            adam: AdamParams::default(),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adam(adam: AdamParams, params: &ParamStore<F>) -> Self {
        let zeros: Vec<Vec<F>> = params
            .iter()
            .map(|(_, t)| vec![F::zero(); t.numel()])
            .collect();
        Self {
            kind: OptimizerKind::Adam,
            adam,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn new(kind: OptimizerKind, adam: AdamParams, params: &ParamStore<F>) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(),
            OptimizerKind::Adam => Self::adam(adam, params),
        }
    }

    /// Applies one update with learning rate `lr`. For SGD this is exactly
    /// `θ ← θ − lr·g`. Adam uses decoupled weight decay on matrices only.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &[Vec<F>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, ((name, t), g)) in params.iter().zip(grads).enumerate() {
            if t.numel() != g.len() {
                return Err(Error::Dimension(format!(
                    "gradient for {name} has {} entries, parameter has {}",
                    g.len(),
                    t.numel()
                )));
            }
            if self.kind == OptimizerKind::Adam && self.m[i].len() != g.len() {
                return Err(Error::Dimension(format!(
                    "optimizer state for {name} is stale"
                )));
            }
        }
        self.t += 1;
        let lr_f = F::of(lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, t), g) in params.iter_mut().zip(grads) {
                    for (x, &gi) in t.data_mut().iter_mut().zip(g) {
                        *x = *x - lr_f * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let a = self.adam;
                let (b1, b2) = (F::of(a.beta1), F::of(a.beta2));
                let c1 = F::of(1.0 - a.beta1.powi(self.t as i32));
                let c2 = F::of(1.0 - a.beta2.powi(self.t as i32));
                let eps = F::of(a.eps);
                let decay = F::of(lr * a.weight_decay);
                for (i, ((_, t), g)) in params.iter_mut().zip(grads).enumerate() {
                    let matrix = t.shape().len() == 2;
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, x) in t.data_mut().iter_mut().enumerate() {
                        let gj = g[j];
                        m[j] = b1 * m[j] + (F::one() - b1) * gj;
                        v[j] = b2 * v[j] + (F::one() - b2) * gj * gj;
                        let step = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        if matrix {
                            *x = *x - decay * *x;
                        }
                        *x = *x - lr_f * step;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<F: Scalar>(grads: &[Vec<F>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm` (0 disables).
/// Returns the norm before clipping.
pub fn clip_gradients<F: Scalar>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = F::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert(
            "theta",
            Tensor::from_f64(vec![values.len()], values).unwrap(),
        )
        .unwrap();
        p
    }

    #[test]
    fn sgd_update_is_literal() {
        let mut p = store(&[1.0, 2.0]);
        Optimizer::sgd()
            .update(&mut p, &[vec![0.5, -0.5]], 0.1)
            .unwrap();
        let got = p.get("theta").unwrap().data();
        assert!((got[0] - 0.95).abs() < 1e-15 && (got[1] - 2.05).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = store(&[1.0, -3.0]);
            let before = p.clone();
            let adam = AdamParams {
                weight_decay: 0.0,
                ..AdamParams::default()
            };
            let mut opt = Optimizer::new(kind, adam, &p);
            opt.update(&mut p, &[vec![0.0, 0.0]], 0.1).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // Bias correction makes the first step ±lr regardless of scale.
        let mut p = store(&[0.0, 0.0]);
        let mut opt = Optimizer::adam(AdamParams::default(), &p);
        opt.update(&mut p, &[vec![3.0, -0.01]], 0.1).unwrap();
        let got = p.get("theta").unwrap().data();
        assert!((got[0] + 0.1).abs() < 1e-6);
        assert!((got[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn clipping_rescales_to_norm() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![vec![0.3f64, 0.4]];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small, vec![vec![0.3, 0.4]]);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = store(&[1.0, 2.0]);
        assert!(Optimizer::sgd().update(&mut p, &[vec![0.0]], 0.1).is_err());
        assert!(Optimizer::sgd().update(&mut p, &[], 0.1).is_err());
    }
}
