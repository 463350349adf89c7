//! Exact order-marginal likelihood by enumeration, and its Jensen bound.

use crate::corpus::Paragraph;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::sequence::{build_decoder_sequence, enumerate_orders, Permutation};
use crate::tensor::Scalar;

/// Largest sentence count enumerated (5! = 120 orders).
pub const EXACT_LIKELIHOOD_MAX_SENTENCES: usize = 5;

/// Total log-probability of the full decoder sequence for every order.
pub fn order_log_likelihoods<F: Scalar>(
    model: &Model<F>,
    p: &Paragraph,
) -> Result<Vec<(Permutation, f64)>> {
    let t = p.num_sentences();
    if t > EXACT_LIKELIHOOD_MAX_SENTENCES {
        return Err(Error::Validation(format!(
            "exact likelihood enumerates all orders; {t} sentences exceeds the budget of \
             {EXACT_LIKELIHOOD_MAX_SENTENCES} ({} orders)",
            (1..=EXACT_LIKELIHOOD_MAX_SENTENCES).product::<usize>()
        )));
    }
    let memory = model.encode(&p.source)?;
    enumerate_orders(t)?
        .into_iter()
        .map(|order| {
            let seq = build_decoder_sequence(p, &order)?;
            let lp: f64 = model
                .sequence_logprob(&memory, &seq)?
                .iter()
                .map(|x| x.as_f64())
                .sum();
            Ok((order, lp))
        })
        .collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodReport {
    pub per_order: Vec<(Permutation, f64)>,
    /// `log Σ_π p(Y_π | X)`, unweighted.
    pub exact: f64,
    /// `exact − ln T!`: the same sum with each order weighted by `1/T!`.
    pub normalized: f64,
    /// `ln T! + mean_π log p(Y_π | X)`; never above `exact`.
    pub jensen: f64,
}

pub fn likelihood_report<F: Scalar>(model: &Model<F>, p: &Paragraph) -> Result<LikelihoodReport> {
    let per_order = order_log_likelihoods(model, p)?;
    let values: Vec<f64> = per_order.iter().map(|(_, v)| *v).collect();
    let n = values.len() as f64;
    let exact = log_sum_exp(&values);
    let jensen = n.ln() + values.iter().sum::<f64>() / n;
    Ok(LikelihoodReport {
        per_order,
        exact,
        normalized: exact - n.ln(),
        jensen,
    })
}

pub fn exact_log_likelihood<F: Scalar>(model: &Model<F>, p: &Paragraph) -> Result<f64> {
    Ok(likelihood_report(model, p)?.exact)
}

pub fn jensen_bound<F: Scalar>(model: &Model<F>, p: &Paragraph) -> Result<f64> {
    Ok(likelihood_report(model, p)?.jensen)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let xs = [-1.0, -2.5, 0.3];
        let direct = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - direct).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
