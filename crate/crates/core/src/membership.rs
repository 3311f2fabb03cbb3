//! Multinomial logistic regression for source-membership probabilities
//! `P(S = s | X = x)`.
//!
//! The model is `softmax(beta_1'x, ..., beta_k'x)` with the last coefficient
//! row pinned at zero for identifiability. There is no intercept unless
//! `with_intercept` is set, in which case a constant feature is appended.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::matrix::Matrix;
use crate::optim::{AdamHyper, AdamState};
use crate::simplex::{softmax, SimplexVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub ridge: f64,
    pub with_intercept: bool,
}

impl Default for SoftmaxConfig {
    fn default() -> Self {
        Self { epochs: 2000, learning_rate: 0.05, ridge: 1e-6, with_intercept: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    /// `num_sources` rows of length `p` (or `p + 1` with intercept, constant last).
    pub beta: Vec<Vec<f64>>,
    pub num_sources: usize,
    pub with_intercept: bool,
}

impl SoftmaxModel {
    pub fn zeros(num_sources: usize, p: usize, with_intercept: bool) -> Self {
        let width = p + usize::from(with_intercept);
        Self { beta: vec![vec![0.0; width]; num_sources], num_sources, with_intercept }
    }

    pub fn input_dim(&self) -> usize {
        self.beta.first().map_or(0, Vec::len) - usize::from(self.with_intercept)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_sources < 2 || self.beta.len() != self.num_sources {
            return Err(Error::Input(format!("membership model needs >= 2 coefficient rows, has {}", self.beta.len())));
        }
        let width = self.beta[0].len();
        if self.beta.iter().any(|r| r.len() != width) {
            return Err(Error::Input("ragged coefficient rows".into()));
        }
        if self.beta.last().unwrap().iter().any(|&v| v != 0.0) {
            return Err(Error::Input("last coefficient row must be pinned at zero".into()));
        }
        Ok(())
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.beta
            .iter()
            .map(|b| {
                let lin: f64 = b.iter().zip(x).map(|(bj, xj)| bj * xj).sum();
                if self.with_intercept { lin + b[b.len() - 1] } else { lin }
            })
            .collect()
    }

    /// Probabilities without the dimension check.
    pub(crate) fn probs(&self, x: &[f64]) -> Vec<f64> {
        positive_softmax(&self.logits(x))
    }
}

/// Softmax floored at the smallest positive double, then renormalized.
pub(crate) fn positive_softmax(logits: &[f64]) -> Vec<f64> {
    let mut w = softmax(logits);
    if w.iter().any(|&v| v <= 0.0) {
        w.iter_mut().for_each(|v| *v = v.max(f64::MIN_POSITIVE));
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= sum);
    }
    w
}

pub fn predict_membership(model: &SoftmaxModel, x: &[f64]) -> Result<SimplexVector> {
    if x.len() != model.input_dim() {
        return Err(Error::Dimension(format!("expected {} covariates, got {}", model.input_dim(), x.len())));
    }
    SimplexVector::normalized(model.probs(x))
}

fn check_labels(labels: &[usize], num_sources: usize) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&s| s == 0 || s > num_sources) {
        return Err(Error::ClassCoverage(format!("label {bad} outside 1..={num_sources}")));
    }
    let mut counts = vec![0usize; num_sources];
    labels.iter().for_each(|&s| counts[s - 1] += 1);
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::ClassCoverage(format!("class {} has no rows", empty + 1)));
    }
    Ok(())
}

/// Mean log-likelihood `(1/n) sum_i log w_{s_i}(x_i)`.
pub fn log_likelihood(model: &SoftmaxModel, x: &Matrix, labels: &[usize]) -> f64 {
    x.rows()
        .zip(labels)
        .map(|(r, &s)| {
            let l = model.logits(r);
            let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            l[s - 1] - lse
        })
        .sum::<f64>()
        / x.nrows() as f64
}

/// Gradient of the mean log-likelihood with respect to every coefficient row
/// (the pinned last row included, so the shape matches `beta`).
pub fn log_likelihood_grad(model: &SoftmaxModel, x: &Matrix, labels: &[usize]) -> Vec<Vec<f64>> {
    let width = model.beta[0].len();
    let mut grad = vec![vec![0.0; width]; model.num_sources];
    for (r, &s) in x.rows().zip(labels) {
        let w = softmax(&model.logits(r));
        for (j, g) in grad.iter_mut().enumerate() {
            let resid = f64::from(u8::from(j + 1 == s)) - w[j];
            g.iter_mut().zip(r).for_each(|(gv, xv)| *gv += resid * xv);
            if model.with_intercept {
                g[width - 1] += resid;
            }
        }
    }
    let n = x.nrows() as f64;
    grad.iter_mut().flatten().for_each(|g| *g /= n);
    grad
}

fn unpack(params: &[f64], k: usize, width: usize, with_intercept: bool) -> SoftmaxModel {
    let mut beta: Vec<Vec<f64>> = params.chunks(width).map(<[f64]>::to_vec).collect();
    beta.push(vec![0.0; width]);
    debug_assert_eq!(beta.len(), k);
    SoftmaxModel { beta, num_sources: k, with_intercept }
}

/// Maximizes the ridge-penalized multinomial log-likelihood by full-batch Adam
/// from `beta = 0`, returning the best iterate seen.
pub fn fit_softmax(x: &Matrix, labels: &[usize], num_sources: usize, config: &SoftmaxConfig) -> Result<SoftmaxModel> {
    if x.nrows() == 0 || labels.len() != x.nrows() {
        return Err(Error::Input(format!("{} rows but {} labels", x.nrows(), labels.len())));
    }
    if num_sources < 2 {
        return Err(Error::Input("membership model needs at least 2 sources".into()));
    }
    check_labels(labels, num_sources)?;
    ensure_finite(x.as_slice(), "covariates")?;
    let hyper = AdamHyper::with_learning_rate(config.learning_rate);
    hyper.validate()?;

    let width = x.ncols() + usize::from(config.with_intercept);
    let free = (num_sources - 1) * width;
    let penalized = |m: &SoftmaxModel| {
        -log_likelihood(m, x, labels) + config.ridge * m.beta.iter().flatten().map(|b| b * b).sum::<f64>()
    };

    let mut state = AdamState::new(vec![0.0; free]);
    let mut best = (f64::INFINITY, state.params.clone());
    for epoch in 0..config.epochs {
        let model = unpack(&state.params, num_sources, width, config.with_intercept);
        let loss = penalized(&model);
        if !loss.is_finite() {
            return Err(Error::Training(format!("log-likelihood not finite at epoch {epoch}")));
        }
        if loss < best.0 {
            best = (loss, state.params.clone());
        }
        let ll_grad = log_likelihood_grad(&model, x, labels);
        let grad: Vec<f64> = ll_grad[..num_sources - 1]
            .iter()
            .flatten()
            .zip(&state.params)
            .map(|(g, b)| -g + 2.0 * config.ridge * b)
            .collect();
        state.step(&grad, &hyper).map_err(|e| Error::Training(e.to_string()))?;
    }
    let last = unpack(&state.params, num_sources, width, config.with_intercept);
    if penalized(&last) < best.0 {
        return Ok(last);
    }
    Ok(unpack(&best.1, num_sources, width, config.with_intercept))
}
