//! Robust treatment rules built from per-source CATEs.
//!
//! For a mixing level `delta` and deviation weights `rho` on the simplex, the
//! robust score is
//!
//! ```text
//! f(x) = sum_s W_s(x) C_s(x),   W_s(x) = delta * omega_s(x) + (1 - delta) * rho_s
//! ```
//!
//! and the rule treats when `f(x) > 0`. The worst-case `rho` minimizes the
//! mean of `f(X) * 1{f(X) > 0}` over the pooled covariates; the indicator is
//! replaced by the ramp `phi_h` and `rho = softmax(z)` is optimized with Adam.
//! `delta = 0` recovers the plain distributionally robust rule over constant
//! source mixtures.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::membership::{fit_softmax, SoftmaxConfig, SoftmaxModel};
use crate::nn::{estimate_source_cate, MlpConfig, SourceCate};
use crate::optim::{AdamHyper, AdamState};
use crate::rng::derive_seed;
use crate::simplex::SimplexVector;

// ── Surrogate ─────────────────────────────────────────────────────────

/// Ramp surrogate for `1{u > 0}`: 0 below `-h`, `(u + h) / 2h` on `[-h, h]`, 1 above `h`.
pub fn phi_h(u: f64, h: f64) -> Result<f64> {
    check_bandwidth(h)?;
    Ok(ramp(u, h))
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("bandwidth must be positive, got {h}")))
    }
}

#[inline]
fn ramp(u: f64, h: f64) -> f64 {
    if u > h {
        1.0
    } else if u < -h {
        0.0
    } else {
        (u + h) / (2.0 * h)
    }
}

/// a.e. derivative of the ramp; the kinks `|u| = h` take the interior slope.
#[inline]
fn ramp_slope(u: f64, h: f64) -> f64 {
    if u.abs() <= h { 1.0 / (2.0 * h) } else { 0.0 }
}

fn check_delta(delta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&delta) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("delta must lie in [0, 1], got {delta}")))
    }
}

// ── Nuisances ─────────────────────────────────────────────────────────

/// Source-level quantities the robust score depends on.
pub trait Nuisance: Sync {
    fn num_sources(&self) -> usize;
    fn dim(&self) -> usize;
    /// `C_s(x)` for every source.
    fn cates(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// `omega_s(x)` for every source.
    fn membership(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Arm-wise outcome regressions `(f1_s(x), f0_s(x))` for every source.
    fn outcomes(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.dim() {
            Ok(())
        } else {
            Err(Error::Dimension(format!("expected {} covariates, got {}", self.dim(), x.len())))
        }
    }
}

impl<T: Nuisance + ?Sized> Nuisance for &T {
    fn num_sources(&self) -> usize {
        (**self).num_sources()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn cates(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).cates(x)
    }
    fn membership(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).membership(x)
    }
    fn outcomes(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        (**self).outcomes(x)
    }
}

impl<T: Nuisance + Send + ?Sized> Nuisance for Arc<T> {
    fn num_sources(&self) -> usize {
        (**self).num_sources()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn cates(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).cates(x)
    }
    fn membership(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).membership(x)
    }
    fn outcomes(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        (**self).outcomes(x)
    }
}

/// Fitted per-source CATE networks plus the membership model.
/// A single source carries no membership model; its weight is identically 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSet {
    pub cates: Vec<SourceCate>,
    pub membership: Option<SoftmaxModel>,
}

impl NuisanceSet {
    pub fn new(cates: Vec<SourceCate>, membership: Option<SoftmaxModel>) -> Result<Self> {
        let set = Self { cates, membership };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.cates.first().ok_or_else(|| Error::Input("no source CATE models".into()))?;
        let p = first.input_dim();
        for (s, c) in self.cates.iter().enumerate() {
            c.f1.validate()?;
            c.f0.validate()?;
            if c.input_dim() != p || c.f0.input_dim() != p {
                return Err(Error::Dimension(format!("source {} CATE model has a different input width", s + 1)));
            }
        }
        match (&self.membership, self.cates.len()) {
            (None, 1) => Ok(()),
            (Some(m), k) if m.num_sources == k && m.input_dim() == p => m.validate(),
            _ => Err(Error::Dimension("membership model does not match the CATE models".into())),
        }
    }
}

impl Nuisance for NuisanceSet {
    fn num_sources(&self) -> usize {
        self.cates.len()
    }
    fn dim(&self) -> usize {
        self.cates[0].input_dim()
    }
    fn cates(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.cates.iter().map(|c| c.cate(x)).collect()
    }
    fn membership(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(match &self.membership {
            Some(m) => m.probs(x),
            None => vec![1.0],
        })
    }
    fn outcomes(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let f1 = self.cates.iter().map(|c| c.f1.predict_one(x)).collect::<Result<_>>()?;
        let f0 = self.cates.iter().map(|c| c.f0.predict_one(x)).collect::<Result<_>>()?;
        Ok((f1, f0))
    }
}

/// Fits one CATE per source (networks on each arm) and, for two or more
/// sources, the membership model on the pooled source covariates.
pub fn fit_nuisances(sources: &[Dataset], mlp: &MlpConfig, softmax: &SoftmaxConfig) -> Result<NuisanceSet> {
    if sources.is_empty() {
        return Err(Error::Input("no source datasets".into()));
    }
    let p = sources[0].dim();
    if sources.iter().any(|d| d.dim() != p) {
        return Err(Error::Dimension("source datasets disagree on covariate width".into()));
    }
    let cates = sources
        .par_iter()
        .enumerate()
        .map(|(s, data)| {
            let cfg = MlpConfig { seed: derive_seed(mlp.seed, s as u64), ..mlp.clone() };
            estimate_source_cate(data, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let membership = if sources.len() >= 2 {
        let mut pooled = Matrix::empty(p);
        let mut labels = Vec::new();
        for (s, d) in sources.iter().enumerate() {
            pooled = pooled.vstack(&d.x)?;
            labels.extend(std::iter::repeat_n(s + 1, d.len()));
        }
        Some(fit_softmax(&pooled, &labels, sources.len(), softmax)?)
    } else {
        None
    };
    NuisanceSet::new(cates, membership)
}

// ── Scores ────────────────────────────────────────────────────────────

/// `W_s(x) = delta * omega_s(x) + (1 - delta) * rho_s`.
pub fn mixture_weights(omega: &[f64], rho: &SimplexVector, delta: f64) -> Vec<f64> {
    omega.iter().zip(rho.as_slice()).map(|(w, r)| delta * w + (1.0 - delta) * r).collect()
}

pub fn robust_score<N: Nuisance + ?Sized>(x: &[f64], nuisance: &N, rho: &SimplexVector, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    nuisance.check_dim(x)?;
    if rho.len() != nuisance.num_sources() {
        return Err(Error::Dimension(format!("rho has {} entries for {} sources", rho.len(), nuisance.num_sources())));
    }
    let c = nuisance.cates(x)?;
    let w = mixture_weights(&nuisance.membership(x)?, rho, delta);
    Ok(w.iter().zip(&c).map(|(w, c)| w * c).sum())
}

// ── Smoothed worst-case objective ─────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoFitConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for RhoFitConfig {
    fn default() -> Self {
        Self { steps: 1000, learning_rate: 0.05 }
    }
}

/// Bandwidth for the ramp surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `m^{-1/2}` times the standard deviation of the scores at uniform `rho`.
    Auto,
    Fixed(f64),
}

/// Per-row CATEs and membership weights over the pooled covariates, computed
/// once so the optimizer never touches the networks.
#[derive(Debug, Clone)]
pub struct SurrogateProblem {
    m: usize,
    k: usize,
    /// Row-major `m x k`.
    cates: Vec<f64>,
    /// `sum_s omega_s(x_i) C_s(x_i)` per row.
    prior_scores: Vec<f64>,
}

impl SurrogateProblem {
    pub fn new<N: Nuisance + ?Sized>(pooled_x: &Matrix, nuisance: &N) -> Result<Self> {
        if pooled_x.is_empty() {
            return Err(Error::Input("pooled covariate sample is empty".into()));
        }
        if pooled_x.ncols() != nuisance.dim() {
            return Err(Error::Dimension(format!(
                "pooled covariates have {} columns, nuisances expect {}",
                pooled_x.ncols(),
                nuisance.dim()
            )));
        }
        let k = nuisance.num_sources();
        let rows: Vec<(Vec<f64>, f64)> = (0..pooled_x.nrows())
            .into_par_iter()
            .map(|i| {
                let x = pooled_x.row(i);
                let c = nuisance.cates(x)?;
                let w = nuisance.membership(x)?;
                let prior = c.iter().zip(&w).map(|(c, w)| c * w).sum();
                Ok((c, prior))
            })
            .collect::<Result<_>>()?;
        let mut cates = Vec::with_capacity(rows.len() * k);
        let mut prior_scores = Vec::with_capacity(rows.len());
        for (c, prior) in rows {
            cates.extend(c);
            prior_scores.push(prior);
        }
        Self::from_parts(cates, prior_scores, k)
    }

    /// Builds a problem straight from per-row CATEs (`m x k`, row-major) and prior scores.
    pub fn from_parts(cates: Vec<f64>, prior_scores: Vec<f64>, k: usize) -> Result<Self> {
        let m = prior_scores.len();
        if m == 0 || k == 0 || cates.len() != m * k {
            return Err(Error::Input(format!("{} CATE values cannot form {m} rows of {k} sources", cates.len())));
        }
        crate::error::ensure_finite(&cates, "CATE")?;
        crate::error::ensure_finite(&prior_scores, "prior score")?;
        Ok(Self { m, k, cates, prior_scores })
    }

    pub fn num_rows(&self) -> usize {
        self.m
    }

    pub fn num_sources(&self) -> usize {
        self.k
    }

    /// Robust scores of every pooled row at `rho`.
    pub fn scores(&self, rho: &[f64], delta: f64) -> Vec<f64> {
        self.cates
            .chunks_exact(self.k)
            .zip(&self.prior_scores)
            .map(|(c, prior)| delta * prior + (1.0 - delta) * c.iter().zip(rho).map(|(c, r)| c * r).sum::<f64>())
            .collect()
    }

    pub fn bandwidth(&self, choice: Bandwidth, delta: f64) -> Result<f64> {
        let h = match choice {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Auto => {
                let scores = self.scores(&vec![1.0 / self.k as f64; self.k], delta);
                let mean = scores.iter().sum::<f64>() / self.m as f64;
                let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (self.m.max(2) - 1) as f64;
                let spread = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
                spread / (self.m as f64).sqrt()
            }
        };
        check_bandwidth(h)?;
        Ok(h)
    }

    /// Mean of `f * phi_h(f)` at simplex point `rho`.
    pub fn value_at(&self, rho: &[f64], delta: f64, h: f64) -> f64 {
        self.scores(rho, delta).iter().map(|&f| f * ramp(f, h)).sum::<f64>() / self.m as f64
    }

    /// Objective and exact gradient with respect to the softmax logits `z`.
    pub fn objective(&self, z: &[f64], delta: f64, h: f64) -> Result<(f64, Vec<f64>)> {
        check_delta(delta)?;
        check_bandwidth(h)?;
        if z.len() != self.k {
            return Err(Error::Dimension(format!("z has {} entries for {} sources", z.len(), self.k)));
        }
        let rho = crate::simplex::softmax(z);
        let mut value = 0.0;
        let mut g_rho = vec![0.0; self.k];
        for (c, prior) in self.cates.chunks_exact(self.k).zip(&self.prior_scores) {
            let f = delta * prior + (1.0 - delta) * c.iter().zip(&rho).map(|(c, r)| c * r).sum::<f64>();
            value += f * ramp(f, h);
            // d/df [f phi(f)] = phi(f) + f phi'(f); df/drho_s = (1 - delta) C_s
            let outer = (ramp(f, h) + f * ramp_slope(f, h)) * (1.0 - delta);
            if outer != 0.0 {
                g_rho.iter_mut().zip(c).for_each(|(g, c)| *g += outer * c);
            }
        }
        let m = self.m as f64;
        value /= m;
        g_rho.iter_mut().for_each(|g| *g /= m);
        // Softmax Jacobian: d rho_s / d z_j = rho_s (1{s=j} - rho_j).
        let mean_g: f64 = rho.iter().zip(&g_rho).map(|(r, g)| r * g).sum();
        let grad = rho.iter().zip(&g_rho).map(|(r, g)| r * (g - mean_g)).collect();
        Ok((value, grad))
    }

    /// Adam over `z` from `z = 0`, then from the best few points of a coarse
    /// simplex lattice; returns the best point visited. The surrogate is not
    /// convex in `rho`, so a single start can stall in a local minimum.
    pub fn fit_rho(&self, delta: f64, h: f64, config: &RhoFitConfig) -> Result<SimplexVector> {
        check_delta(delta)?;
        check_bandwidth(h)?;
        if self.k == 1 {
            return Ok(SimplexVector::uniform(1));
        }
        let hyper = AdamHyper::with_learning_rate(config.learning_rate);
        hyper.validate()?;
        let mut starts = vec![vec![0.0; self.k]];
        if delta < 1.0 {
            let mut lattice: Vec<(f64, Vec<f64>)> = simplex_lattice(self.k, LATTICE_POINTS)
                .into_iter()
                .map(|rho| (self.value_at(&rho, delta, h), rho))
                .collect();
            lattice.sort_by(|a, b| a.0.total_cmp(&b.0));
            starts.extend(lattice.into_iter().take(EXTRA_STARTS).map(|(_, rho)| {
                let logs: Vec<f64> = rho.iter().map(|r| r.max(START_FLOOR).ln()).collect();
                let mean = logs.iter().sum::<f64>() / self.k as f64;
                logs.into_iter().map(|l| l - mean).collect()
            }));
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for z0 in starts {
            let mut state = AdamState::new(z0);
            for step in 0..=config.steps {
                let (value, grad) = self.objective(&state.params, delta, h)?;
                if !value.is_finite() {
                    return Err(Error::Numeric("surrogate objective is not finite".into()));
                }
                if best.as_ref().is_none_or(|(b, _)| value < *b) {
                    best = Some((value, state.params.clone()));
                }
                if step < config.steps {
                    state.step(&grad, &hyper)?;
                }
            }
        }
        let (_, z) = best.ok_or_else(|| Error::Numeric("no optimizer iterate".into()))?;
        SimplexVector::normalized(crate::simplex::softmax(&z))
    }
}

const LATTICE_POINTS: usize = 256;
const EXTRA_STARTS: usize = 3;
const START_FLOOR: f64 = 1e-3;

/// Points `c / r` with `c` a composition of `r` into `k` parts, for the
/// largest `r` (at least 1) giving no more than `max_points` points.
fn simplex_lattice(k: usize, max_points: usize) -> Vec<Vec<f64>> {
    let count = |r: usize| -> f64 { (1..k).map(|i| (r + i) as f64 / i as f64).product() };
    let mut r = 1;
    while count(r + 1) <= max_points as f64 {
        r += 1;
    }
    let mut out = Vec::new();
    let mut parts = vec![0usize; k];
    fn fill(i: usize, left: usize, r: usize, parts: &mut [usize], out: &mut Vec<Vec<f64>>) {
        if i + 1 == parts.len() {
            parts[i] = left;
            out.push(parts.iter().map(|&c| c as f64 / r as f64).collect());
            return;
        }
        for c in 0..=left {
            parts[i] = c;
            fill(i + 1, left - c, r, parts, out);
        }
    }
    fill(0, r, r, &mut parts, &mut out);
    out
}

pub fn smoothed_objective<N: Nuisance + ?Sized>(
    z: &[f64],
    pooled_x: &Matrix,
    nuisance: &N,
    delta: f64,
    h: f64,
) -> Result<(f64, Vec<f64>)> {
    SurrogateProblem::new(pooled_x, nuisance)?.objective(z, delta, h)
}

pub fn fit_rho<N: Nuisance + ?Sized>(
    pooled_x: &Matrix,
    nuisance: &N,
    delta: f64,
    h: f64,
    config: &RhoFitConfig,
) -> Result<SimplexVector> {
    SurrogateProblem::new(pooled_x, nuisance)?.fit_rho(delta, h, config)
}

// ── Policies ──────────────────────────────────────────────────────────

/// Binary treatment rule over covariates.
pub trait Policy: Sync {
    fn decide(&self, x: &[f64]) -> Result<u8>;
}

/// Treats iff the robust score is strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdroPolicy<N = NuisanceSet> {
    pub delta: f64,
    pub rho: SimplexVector,
    pub nuisance: N,
}

impl<N: Nuisance> PdroPolicy<N> {
    pub fn new(delta: f64, rho: SimplexVector, nuisance: N) -> Result<Self> {
        check_delta(delta)?;
        if rho.len() != nuisance.num_sources() {
            return Err(Error::Dimension(format!("rho has {} entries for {} sources", rho.len(), nuisance.num_sources())));
        }
        Ok(Self { delta, rho, nuisance })
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        robust_score(x, &self.nuisance, &self.rho, self.delta)
    }

    pub fn dim(&self) -> usize {
        self.nuisance.dim()
    }
}

impl<N: Nuisance> Policy for PdroPolicy<N> {
    fn decide(&self, x: &[f64]) -> Result<u8> {
        Ok(u8::from(self.score(x)? > 0.0))
    }
}

pub fn decide<P: Policy + ?Sized>(policy: &P, x: &[f64]) -> Result<u8> {
    policy.decide(x)
}

/// Distributionally robust rule over constant source mixtures (`delta = 0`).
pub fn fit_dro<N: Nuisance>(pooled_x: &Matrix, nuisance: N, h: f64, config: &RhoFitConfig) -> Result<PdroPolicy<N>> {
    let rho = fit_rho(pooled_x, &nuisance, 0.0, h, config)?;
    PdroPolicy::new(0.0, rho, nuisance)
}

// ── Delta tuning ──────────────────────────────────────────────────────

/// Default grid `{0, 0.05, ..., 1}`.
pub fn default_delta_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Outcome of the calibration grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSelection {
    pub delta: f64,
    pub rho: SimplexVector,
    pub bandwidth: f64,
    /// `(delta, rho, calibration error)` for every grid point.
    pub path: Vec<(f64, SimplexVector, f64)>,
}

/// Squared prediction error of the mixture outcome model on labeled target rows:
/// mean over treated rows of `(sum_s W_s f1_s - y)^2` plus the same over controls.
pub fn calibration_error<N: Nuisance + ?Sized>(
    calibration: &Dataset,
    nuisance: &N,
    rho: &SimplexVector,
    delta: f64,
) -> Result<f64> {
    let (mut sse, mut count) = ([0.0; 2], [0usize; 2]);
    for i in 0..calibration.len() {
        let x = calibration.x.row(i);
        let w = mixture_weights(&nuisance.membership(x)?, rho, delta);
        let (f1, f0) = nuisance.outcomes(x)?;
        let arm = calibration.a[i] as usize;
        let pred: f64 = w.iter().zip(if arm == 1 { &f1 } else { &f0 }).map(|(w, f)| w * f).sum();
        sse[arm] += (pred - calibration.y[i]).powi(2);
        count[arm] += 1;
    }
    if count[0] == 0 || count[1] == 0 {
        return Err(Error::ArmCoverage(format!(
            "calibration needs treated and control rows, got {} and {}",
            count[1], count[0]
        )));
    }
    Ok(sse[1] / count[1] as f64 + sse[0] / count[0] as f64)
}

/// Grid search over `delta`; ties go to the larger `delta`.
pub fn tune_delta<N: Nuisance + ?Sized>(
    calibration: &Dataset,
    nuisance: &N,
    problem: &SurrogateProblem,
    bandwidth: Bandwidth,
    grid: &[f64],
    config: &RhoFitConfig,
) -> Result<DeltaSelection> {
    if grid.is_empty() {
        return Err(Error::Parameter("delta grid is empty".into()));
    }
    grid.iter().try_for_each(|&d| check_delta(d))?;
    if calibration.dim() != nuisance.dim() {
        return Err(Error::Dimension("calibration covariates do not match the nuisances".into()));
    }
    let treated = calibration.a.iter().filter(|&&a| a == 1).count();
    if treated == 0 || treated == calibration.len() {
        return Err(Error::ArmCoverage(format!(
            "calibration needs treated and control rows, got {treated} of {}",
            calibration.len()
        )));
    }
    let path = grid
        .par_iter()
        .map(|&delta| {
            let h = problem.bandwidth(bandwidth, delta)?;
            let rho = problem.fit_rho(delta, h, config)?;
            let err = calibration_error(calibration, nuisance, &rho, delta)?;
            Ok((delta, rho, err, h))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, cand) in path.iter().enumerate().skip(1) {
        let cur = &path[best];
        if cand.2 < cur.2 || (cand.2 == cur.2 && cand.0 > cur.0) {
            best = i;
        }
    }
    let (delta, rho, _, h) = path[best].clone();
    Ok(DeltaSelection { delta, rho, bandwidth: h, path: path.into_iter().map(|(d, r, e, _)| (d, r, e)).collect() })
}
