//! Synthetic multi-source benchmark: four scenarios with three sources each.
//!
//! Covariates are i.i.d. standard normal truncated to `[-10, 10]`. Source
//! membership follows `P(S = s | x) = softmax(beta_1'x, beta_2'x, beta_3'x)`.
//! Source outcomes are `Y = f_s(X)(2A - 1) + eps`; target outcomes replace
//! `f_s` by the mixture `g(x) = delta sum_s omega_s(x) f_s(x) + (1 - delta) sum_s rho_s f_s(x)`.
//! Treatment is a fair coin and `eps ~ N(0, 1)`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::learner::Nuisance;
use crate::matrix::Matrix;
use crate::membership::positive_softmax;
use crate::rng::{stream_rng, Stream};
use crate::simplex::SimplexVector;

pub const NUM_SOURCES: usize = 3;
pub const TRUNCATION: f64 = 10.0;

const BETA: [[f64; 5]; NUM_SOURCES] = [
    [-3.0, 2.0, 1.0, 0.0, 0.0],
    [1.0, -1.0, 3.0, 0.0, -1.0],
    [1.0, 0.0, 0.0, -1.0, 2.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: u8,
    pub dim_p: usize,
    /// Membership coefficients, zero-padded to `dim_p`.
    pub beta_true: Vec<Vec<f64>>,
    pub noise_sd: f64,
    /// `P(A = 1)`; 0.5 in every scenario.
    pub treat_prob: f64,
}

impl ScenarioSpec {
    pub fn new(id: u8) -> Result<Self> {
        let dim_p = match id {
            1 | 2 => 5,
            3 | 4 => 30,
            _ => return Err(Error::Parameter(format!("scenario must be 1-4, got {id}"))),
        };
        let beta_true = BETA
            .iter()
            .map(|b| {
                let mut row = b.to_vec();
                row.resize(dim_p, 0.0);
                row
            })
            .collect();
        Ok(Self { id, dim_p, beta_true, noise_sd: 1.0, treat_prob: 0.5 })
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.dim_p {
            Ok(())
        } else {
            Err(Error::Dimension(format!("scenario {} expects {} covariates, got {}", self.id, self.dim_p, x.len())))
        }
    }

    /// `f_s(x)` for every source.
    pub fn source_effects(&self, x: &[f64]) -> Result<Vec<f64>> {
        (1..=NUM_SOURCES).map(|s| scenario_f(self, s, x)).collect()
    }
}

/// The outcome-effect function `f_s` of a scenario (`s` is 1-based).
pub fn scenario_f(spec: &ScenarioSpec, s: usize, x: &[f64]) -> Result<f64> {
    spec.check_x(x)?;
    let v = |j: usize| x[j - 1];
    let out = match (spec.id, s) {
        (1, 1) => 3.0 * v(1) + v(3) + v(4) - v(5),
        (1, 2) => v(1) - v(2) - 2.0 * v(3) + v(4) + v(5),
        (1, 3) => v(1) + 2.0 * v(2) + v(3) - v(4) + v(5),
        (2, 1) => -v(1).sin() + (v(2) / 10.0).exp() - (v(3) - v(4)).powi(2) + v(5).powi(3),
        (2, 2) => v(1).sin() - v(2) * v(3) - v(3).powi(2) + v(4).powi(2) - v(5).max(0.0),
        (2, 3) => -2.0 * v(1) - v(2).powi(2) + v(3).powi(2) - v(4) + v(5).abs(),
        (3, 1) => v(1) + v(2) + v(3) + v(4) - 3.0 * v(5),
        (3, 2) => v(1) - 2.0 * v(2) + 2.0 * v(3) + v(4) + 3.0 * v(5),
        (3, 3) => v(1) + v(2) + v(3) - v(4),
        (4, 1) => v(1).sin() + (v(2) + v(3)).exp() + (v(4) - 3.0 * v(5)).powi(2) + 3.0 * v(6),
        (4, 2) => (v(1) * v(2)).max(0.0) + v(3) - v(4) + v(5).powi(2),
        (4, 3) => -5.0 * v(1) - v(2).powi(3) - (v(3) - v(4)).powi(2) + v(5).abs(),
        (id, s) => return Err(Error::Parameter(format!("no effect function for scenario {id}, source {s}"))),
    };
    Ok(out)
}

fn membership_probs(spec: &ScenarioSpec, x: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = spec.beta_true.iter().map(|b| b.iter().zip(x).map(|(b, x)| b * x).sum()).collect();
    positive_softmax(&logits)
}

/// `omega_s(x) = P(S = s | X = x)` under the scenario's coefficients.
pub fn true_membership(spec: &ScenarioSpec, x: &[f64]) -> Result<SimplexVector> {
    spec.check_x(x)?;
    SimplexVector::normalized(membership_probs(spec, x))
}

fn check_mixture(delta: f64, rho: &SimplexVector) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Parameter(format!("delta must lie in [0, 1], got {delta}")));
    }
    if rho.len() != NUM_SOURCES {
        return Err(Error::Dimension(format!("rho must have {NUM_SOURCES} entries")));
    }
    Ok(())
}

/// Target effect function `g(x)`; outcomes are `g(x)(2A - 1) + eps`.
pub fn target_effect(spec: &ScenarioSpec, x: &[f64], delta: f64, rho: &SimplexVector) -> Result<f64> {
    check_mixture(delta, rho)?;
    let f = spec.source_effects(x)?;
    let omega = membership_probs(spec, x);
    let prior: f64 = omega.iter().zip(&f).map(|(w, f)| w * f).sum();
    let fixed: f64 = rho.as_slice().iter().zip(&f).map(|(r, f)| r * f).sum();
    Ok(delta * prior + (1.0 - delta) * fixed)
}

/// `E[Y(1) - Y(0) | X = x] = 2 g(x)` in the target population.
pub fn true_target_cate(spec: &ScenarioSpec, x: &[f64], delta: f64, rho: &SimplexVector) -> Result<f64> {
    Ok(2.0 * target_effect(spec, x, delta, rho)?)
}

fn truncated_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= TRUNCATION {
            return v;
        }
    }
}

fn draw_covariates<R: Rng>(rng: &mut R, p: usize) -> Vec<f64> {
    (0..p).map(|_| truncated_normal(rng)).collect()
}

/// How per-source sample sizes are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSampling {
    /// Draw `(X, S)` jointly and keep rows until every source holds its quota.
    EqualQuota,
    /// `NUM_SOURCES * n` joint draws; source sizes are whatever the categorical gives.
    Natural,
}

pub fn gen_source(spec: &ScenarioSpec, n_per_source: usize, seed: u64) -> Result<Dataset> {
    gen_source_with(spec, n_per_source, seed, SourceSampling::EqualQuota)
}

/// Pooled labeled source data, rows in acceptance order, labels `1..=3`.
pub fn gen_source_with(spec: &ScenarioSpec, n_per_source: usize, seed: u64, sampling: SourceSampling) -> Result<Dataset> {
    if n_per_source == 0 {
        return Err(Error::Parameter("need at least one row per source".into()));
    }
    let mut cov_rng = stream_rng(seed, Stream::Covariates);
    let mut mem_rng = stream_rng(seed, Stream::Membership);
    let mut treat_rng = stream_rng(seed, Stream::Treatments);
    let mut noise_rng = stream_rng(seed, Stream::Noise);

    let total = n_per_source * NUM_SOURCES;
    let mut x = Matrix::empty(spec.dim_p);
    let (mut a, mut y, mut s) = (Vec::with_capacity(total), Vec::with_capacity(total), Vec::with_capacity(total));
    let mut counts = [0usize; NUM_SOURCES];
    let mut draws = 0usize;
    while s.len() < total {
        let row = draw_covariates(&mut cov_rng, spec.dim_p);
        let omega = membership_probs(spec, &row);
        let u: f64 = mem_rng.random();
        let mut src = NUM_SOURCES - 1;
        let mut acc = 0.0;
        for (k, w) in omega.iter().enumerate() {
            acc += w;
            if u < acc {
                src = k;
                break;
            }
        }
        draws += 1;
        if sampling == SourceSampling::EqualQuota && counts[src] >= n_per_source {
            continue;
        }
        counts[src] += 1;
        let treat = u8::from(treat_rng.random::<f64>() < spec.treat_prob);
        let eps: f64 = StandardNormal.sample(&mut noise_rng);
        let effect = scenario_f(spec, src + 1, &row)?;
        y.push(effect * (2.0 * f64::from(treat) - 1.0) + spec.noise_sd * eps);
        a.push(treat);
        s.push(src + 1);
        x.push_row(&row)?;
        if sampling == SourceSampling::Natural && draws == total {
            break;
        }
    }
    Dataset::new(x, a, y, Some(s))
}

/// Unlabeled target covariates; identical to the `x` of [`gen_target`] at the same seed.
pub fn gen_target_covariates(spec: &ScenarioSpec, n: usize, seed: u64) -> Matrix {
    let mut cov_rng = stream_rng(seed, Stream::Covariates);
    let mut x = Matrix::zeros(n, spec.dim_p);
    for i in 0..n {
        let row = draw_covariates(&mut cov_rng, spec.dim_p);
        x.row_mut(i).copy_from_slice(&row);
    }
    x
}

/// Labeled target sample drawn from the mixture outcome model.
pub fn gen_target(spec: &ScenarioSpec, n: usize, delta: f64, rho: &SimplexVector, seed: u64) -> Result<Dataset> {
    check_mixture(delta, rho)?;
    let x = gen_target_covariates(spec, n, seed);
    let mut treat_rng = stream_rng(seed, Stream::Treatments);
    let mut noise_rng = stream_rng(seed, Stream::Noise);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for row in x.rows() {
        let treat = u8::from(treat_rng.random::<f64>() < spec.treat_prob);
        let eps: f64 = StandardNormal.sample(&mut noise_rng);
        let g = target_effect(spec, row, delta, rho)?;
        y.push(g * (2.0 * f64::from(treat) - 1.0) + spec.noise_sd * eps);
        a.push(treat);
    }
    Dataset::new(x, a, y, None)
}

/// `count` draws from a symmetric Dirichlet(alpha) on `k` coordinates.
pub fn sample_dirichlet_many(k: usize, alpha: f64, count: usize, seed: u64) -> Result<Vec<SimplexVector>> {
    if k < 2 {
        return Err(Error::Parameter(format!("Dirichlet needs k >= 2, got {k}")));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!("Dirichlet concentration must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut rng = stream_rng(seed, Stream::Dirichlet);
    (0..count)
        .map(|_| {
            let mut g: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
            if g.iter().sum::<f64>() <= 0.0 {
                // Every gamma underflowed (tiny alpha): the limit law is a random vertex.
                let hot = rng.random_range(0..k);
                g.iter_mut().enumerate().for_each(|(i, v)| *v = f64::from(u8::from(i == hot)));
            }
            SimplexVector::normalized(g)
        })
        .collect()
}

pub fn sample_dirichlet(k: usize, alpha: f64, seed: u64) -> Result<SimplexVector> {
    Ok(sample_dirichlet_many(k, alpha, 1, seed)?.remove(0))
}

/// Exact nuisances of a scenario: `C_s = 2 f_s`, `omega` from the true
/// coefficients, arm regressions `(f_s, -f_s)`.
#[derive(Debug, Clone)]
pub struct OracleNuisance {
    pub spec: ScenarioSpec,
}

impl Nuisance for OracleNuisance {
    fn num_sources(&self) -> usize {
        NUM_SOURCES
    }
    fn dim(&self) -> usize {
        self.spec.dim_p
    }
    fn cates(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.spec.source_effects(x)?.into_iter().map(|f| 2.0 * f).collect())
    }
    fn membership(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.spec.check_x(x)?;
        Ok(membership_probs(&self.spec, x))
    }
    fn outcomes(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = self.spec.source_effects(x)?;
        let neg = f.iter().map(|v| -v).collect();
        Ok((f, neg))
    }
}
