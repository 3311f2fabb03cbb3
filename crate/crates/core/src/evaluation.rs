//! Policy value estimators and the sample-weighted baseline rule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{ensure_finite, Error, Result};
use crate::learner::{Nuisance, Policy};
use crate::matrix::Matrix;
use crate::membership::{fit_softmax, SoftmaxConfig, SoftmaxModel};
use crate::simplex::SimplexVector;
use crate::synthetic::{gen_target_covariates, sample_dirichlet_many, ScenarioSpec, NUM_SOURCES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method_name: String,
    pub policy_value: f64,
    pub worst_case_value: Option<f64>,
    pub n_test: usize,
    pub rho_draws: usize,
    pub metadata: BTreeMap<String, String>,
}

pub fn decisions<P: Policy + ?Sized>(policy: &P, x: &Matrix) -> Result<Vec<u8>> {
    x.rows().map(|row| policy.decide(row)).collect()
}

/// `(1/m) sum_i cate(X_i) d(X_i)`.
pub fn empirical_policy_value<P, F>(policy: &P, x_test: &Matrix, cate_oracle: F) -> Result<f64>
where
    P: Policy + ?Sized,
    F: Fn(&[f64]) -> Result<f64>,
{
    if x_test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let mut total = 0.0;
    for row in x_test.rows() {
        if policy.decide(row)? == 1 {
            total += cate_oracle(row)?;
        }
    }
    Ok(total / x_test.nrows() as f64)
}

/// Fixed test covariates with the pieces of the true target CATE that do not
/// depend on `rho`, so many mixtures and policies can share one pass.
#[derive(Debug, Clone)]
pub struct WorstCaseDesign {
    pub x_test: Matrix,
    pub delta_true: f64,
    /// `sum_s omega_s(x) f_s(x)` per row.
    prior: Vec<f64>,
    /// `f_s(x)` per row, row-major with `NUM_SOURCES` columns.
    effects: Vec<f64>,
}

impl WorstCaseDesign {
    pub fn new(spec: &ScenarioSpec, x_test: Matrix, delta_true: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&delta_true) {
            return Err(Error::Parameter(format!("delta must lie in [0, 1], got {delta_true}")));
        }
        if x_test.is_empty() {
            return Err(Error::Input("empty test set".into()));
        }
        let mut prior = Vec::with_capacity(x_test.nrows());
        let mut effects = Vec::with_capacity(x_test.nrows() * NUM_SOURCES);
        for row in x_test.rows() {
            let f = spec.source_effects(row)?;
            let omega = crate::synthetic::true_membership(spec, row)?;
            prior.push(omega.as_slice().iter().zip(&f).map(|(w, f)| w * f).sum());
            effects.extend(f);
        }
        Ok(Self { x_test, delta_true, prior, effects })
    }

    /// Design with `n_test` covariate rows drawn from `seed`.
    pub fn sample(spec: &ScenarioSpec, delta_true: f64, n_test: usize, seed: u64) -> Result<Self> {
        Self::new(spec, gen_target_covariates(spec, n_test, seed), delta_true)
    }

    pub fn len(&self) -> usize {
        self.prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior.is_empty()
    }

    /// True target CATE of row `i` under mixture `rho`.
    pub fn cate(&self, i: usize, rho: &SimplexVector) -> f64 {
        let f = &self.effects[i * NUM_SOURCES..(i + 1) * NUM_SOURCES];
        let fixed: f64 = rho.as_slice().iter().zip(f).map(|(r, f)| r * f).sum();
        2.0 * (self.delta_true * self.prior[i] + (1.0 - self.delta_true) * fixed)
    }

    /// Empirical value of fixed decisions under mixture `rho`.
    pub fn value(&self, decisions: &[u8], rho: &SimplexVector) -> Result<f64> {
        if decisions.len() != self.len() {
            return Err(Error::Dimension(format!("{} decisions for {} test rows", decisions.len(), self.len())));
        }
        if rho.len() != NUM_SOURCES {
            return Err(Error::Dimension(format!("rho must have {NUM_SOURCES} entries")));
        }
        let total: f64 = decisions.iter().enumerate().filter(|(_, &d)| d == 1).map(|(i, _)| self.cate(i, rho)).sum();
        Ok(total / self.len() as f64)
    }

    /// Minimum of [`Self::value`] over `draws`.
    pub fn worst_case(&self, decisions: &[u8], draws: &[SimplexVector]) -> Result<f64> {
        if draws.is_empty() {
            return Err(Error::Parameter("need at least one mixture draw".into()));
        }
        draws.iter().try_fold(f64::INFINITY, |acc, rho| Ok(acc.min(self.value(decisions, rho)?)))
    }
}

/// Minimum empirical value over `n_draws` Dirichlet(alpha) mixtures on
/// `n_test` target covariates; both are drawn from `seed`.
pub fn worst_case_value<P: Policy + ?Sized>(
    policy: &P,
    spec: &ScenarioSpec,
    delta_true: f64,
    n_test: usize,
    n_draws: usize,
    alpha: f64,
    seed: u64,
) -> Result<f64> {
    if n_draws == 0 {
        return Err(Error::Parameter("need at least one mixture draw".into()));
    }
    let design = WorstCaseDesign::sample(spec, delta_true, n_test, seed)?;
    let draws = sample_dirichlet_many(NUM_SOURCES, alpha, n_draws, seed)?;
    design.worst_case(&decisions(policy, &design.x_test)?, &draws)
}

/// Doubly robust value from per-row quantities: `propensity[i]` is the
/// probability of the arm actually received by row `i`.
pub fn doubly_robust_from_parts(data: &Dataset, decisions: &[u8], propensity: &[f64], f1: &[f64], f0: &[f64]) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Input("empty evaluation set".into()));
    }
    if [decisions.len(), propensity.len(), f1.len(), f0.len()].iter().any(|&l| l != n) {
        return Err(Error::Dimension(format!("per-row inputs must all have {n} entries")));
    }
    ensure_finite(f1, "treated outcome predictions")?;
    ensure_finite(f0, "control outcome predictions")?;
    let mut total = 0.0;
    for i in 0..n {
        let pi = propensity[i];
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::Positivity(format!("propensity {pi} at row {} is outside (0, 1)", i + 1)));
        }
        let d = decisions[i];
        let fitted = if data.a[i] == 1 { f1[i] } else { f0[i] };
        if data.a[i] == d {
            total += (data.y[i] - fitted) / pi;
        }
        total += if d == 1 { f1[i] } else { f0[i] };
    }
    Ok(total / n as f64)
}

/// `(1/N) sum_i [ 1{A_i = d_i} / pi(A_i, X_i) (Y_i - f_{A_i}(X_i)) + d_i f_1(X_i) + (1 - d_i) f_0(X_i) ]`.
pub fn doubly_robust_value<P, Pi, F1, F0>(policy: &P, data: &Dataset, propensity: Pi, f1_hat: F1, f0_hat: F0) -> Result<f64>
where
    P: Policy + ?Sized,
    Pi: Fn(u8, &[f64]) -> Result<f64>,
    F1: Fn(&[f64]) -> Result<f64>,
    F0: Fn(&[f64]) -> Result<f64>,
{
    let d = decisions(policy, &data.x)?;
    let mut pi = Vec::with_capacity(data.len());
    let (mut f1, mut f0) = (Vec::with_capacity(data.len()), Vec::with_capacity(data.len()));
    for (i, row) in data.x.rows().enumerate() {
        pi.push(propensity(data.a[i], row)?);
        f1.push(f1_hat(row)?);
        f0.push(f0_hat(row)?);
    }
    doubly_robust_from_parts(data, &d, &pi, &f1, &f0)
}

/// Treats iff the source-size-weighted average of the source CATEs is positive.
#[derive(Debug, Clone)]
pub struct NaivePolicy<N> {
    pub weights: Vec<f64>,
    pub nuisance: N,
}

impl<N: Nuisance> NaivePolicy<N> {
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        let c = self.nuisance.cates(x)?;
        Ok(self.weights.iter().zip(&c).map(|(w, c)| w * c).sum())
    }
}

impl<N: Nuisance> Policy for NaivePolicy<N> {
    fn decide(&self, x: &[f64]) -> Result<u8> {
        Ok(u8::from(self.score(x)? > 0.0))
    }
}

pub fn naive_policy<N: Nuisance>(nuisance: N, source_sizes: &[usize]) -> Result<NaivePolicy<N>> {
    if source_sizes.len() != nuisance.num_sources() {
        return Err(Error::Dimension(format!(
            "{} source sizes for {} sources",
            source_sizes.len(),
            nuisance.num_sources()
        )));
    }
    let total: usize = source_sizes.iter().sum();
    if total == 0 {
        return Err(Error::Input("source sizes sum to zero".into()));
    }
    let weights = source_sizes.iter().map(|&n| n as f64 / total as f64).collect();
    Ok(NaivePolicy { weights, nuisance })
}

pub const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);

/// Logistic model for `P(A = 1 | x)` with an intercept; predictions are
/// clipped to [`PROPENSITY_CLIP`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticPropensity {
    pub model: SoftmaxModel,
}

impl LogisticPropensity {
    pub fn fit(data: &Dataset) -> Result<Self> {
        let labels: Vec<usize> = data.a.iter().map(|&a| if a == 1 { 1 } else { 2 }).collect();
        let config = SoftmaxConfig { with_intercept: true, ..SoftmaxConfig::default() };
        let model = fit_softmax(&data.x, &labels, 2, &config).map_err(|e| match e {
            Error::ClassCoverage(msg) => Error::ArmCoverage(msg),
            other => other,
        })?;
        Ok(Self { model })
    }

    /// Unclipped fitted `P(A = 1 | x)`.
    pub fn raw_treated_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.model.input_dim() {
            return Err(Error::Dimension(format!("expected {} covariates, got {}", self.model.input_dim(), x.len())));
        }
        Ok(self.model.probs(x)[0])
    }

    /// Clipped `P(A = a | x)` and whether clipping was applied.
    pub fn arm_prob(&self, a: u8, x: &[f64]) -> Result<(f64, bool)> {
        let raw = self.raw_treated_prob(x)?;
        let clipped = raw.clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1);
        let p = if a == 1 { clipped } else { 1.0 - clipped };
        Ok((p, clipped != raw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::PdroPolicy;
    use crate::rng::{stream_rng, Stream};
    use crate::synthetic::{gen_target, target_effect};
    use rand::Rng;

    struct Always(u8);
    impl Policy for Always {
        fn decide(&self, _: &[f64]) -> Result<u8> {
            Ok(self.0)
        }
    }

    struct SignOf(fn(&[f64]) -> f64);
    impl Policy for SignOf {
        fn decide(&self, x: &[f64]) -> Result<u8> {
            Ok(u8::from((self.0)(x) > 0.0))
        }
    }

    /// Fixed per-source CATEs; arm regressions are `(c/2, -c/2)`.
    struct Fixed(Vec<f64>);
    impl Nuisance for Fixed {
        fn num_sources(&self) -> usize {
            self.0.len()
        }
        fn dim(&self) -> usize {
            1
        }
        fn cates(&self, _: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
        fn membership(&self, _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![1.0 / self.0.len() as f64; self.0.len()])
        }
        fn outcomes(&self, _: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((self.0.iter().map(|c| c / 2.0).collect(), self.0.iter().map(|c| -c / 2.0).collect()))
        }
    }

    fn column(v: &[f64]) -> Matrix {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn empirical_value_examples() {
        let x = column(&[1.0, -1.0, 2.0]);
        let oracle = |r: &[f64]| Ok(r[0]);
        assert!((empirical_policy_value(&Always(1), &x, oracle).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(empirical_policy_value(&Always(0), &x, oracle).unwrap(), 0.0);
        let score_one = SignOf(|_| 1.0);
        assert_eq!(empirical_policy_value(&score_one, &x, |_| Ok(2.5)).unwrap(), 2.5);
        assert!(matches!(empirical_policy_value(&Always(1), &Matrix::empty(1), oracle), Err(Error::Input(_))));
    }

    #[test]
    fn empirical_value_is_linear_in_oracle() {
        let x = gen_target_covariates(&ScenarioSpec::new(1).unwrap(), 200, 1);
        let policy = SignOf(|r| r[1] - 0.2);
        let base = empirical_policy_value(&policy, &x, |r| Ok(r[0] + r[2])).unwrap();
        for c in [0.5, 3.0, -2.0] {
            let scaled = empirical_policy_value(&policy, &x, |r| Ok(c * (r[0] + r[2]))).unwrap();
            assert!((scaled - c * base).abs() < 1e-12);
        }
    }

    #[test]
    fn design_matches_true_cate() {
        let spec = ScenarioSpec::new(2).unwrap();
        let design = WorstCaseDesign::sample(&spec, 0.4, 30, 2).unwrap();
        let rho = SimplexVector::new(vec![0.5, 0.2, 0.3]).unwrap();
        for i in 0..design.len() {
            let truth = 2.0 * target_effect(&spec, design.x_test.row(i), 0.4, &rho).unwrap();
            assert!((design.cate(i, &rho) - truth).abs() < 1e-12);
        }
    }

    #[test]
    fn worst_case_examples() {
        let spec = ScenarioSpec::new(1).unwrap();
        let policy = SignOf(|r| r[0]);
        let single = worst_case_value(&policy, &spec, 0.5, 100, 1, 1.0, 7).unwrap();
        let rho = sample_dirichlet_many(3, 1.0, 1, 7).unwrap().remove(0);
        let x = gen_target_covariates(&spec, 100, 7);
        let direct = empirical_policy_value(&policy, &x, |r| crate::synthetic::true_target_cate(&spec, r, 0.5, &rho)).unwrap();
        assert!((single - direct).abs() < 1e-12);

        let design = WorstCaseDesign::sample(&spec, 1.0, 100, 3).unwrap();
        let d = decisions(&policy, &design.x_test).unwrap();
        let draws = sample_dirichlet_many(3, 1.0, 10, 3).unwrap();
        let values: Vec<f64> = draws.iter().map(|r| design.value(&d, r).unwrap()).collect();
        assert!(values.iter().all(|v| (v - values[0]).abs() < 1e-12));

        let few = worst_case_value(&policy, &spec, 0.3, 100, 5, 1.0, 11).unwrap();
        let many = worst_case_value(&policy, &spec, 0.3, 100, 50, 1.0, 11).unwrap();
        assert!(many <= few);
        assert!(matches!(worst_case_value(&policy, &spec, 0.3, 100, 0, 1.0, 11), Err(Error::Parameter(_))));
    }

    #[test]
    fn worst_case_below_value_at_included_draw() {
        let spec = ScenarioSpec::new(1).unwrap();
        let design = WorstCaseDesign::sample(&spec, 0.25, 300, 4).unwrap();
        let d = decisions(&SignOf(|r| r[0] + r[1]), &design.x_test).unwrap();
        let mut draws = sample_dirichlet_many(3, 1.0, 20, 4).unwrap();
        draws.push(SimplexVector::uniform(3));
        let worst = design.worst_case(&d, &draws).unwrap();
        assert!(worst <= design.value(&d, &SimplexVector::uniform(3)).unwrap());
    }

    fn labeled(a: Vec<u8>, y: Vec<f64>) -> Dataset {
        let x = column(&(0..a.len()).map(|i| i as f64).collect::<Vec<_>>());
        Dataset::new(x, a, y, None).unwrap()
    }

    /// Decides the arm stored in a lookup indexed by the covariate value.
    struct Lookup(Vec<u8>);
    impl Policy for Lookup {
        fn decide(&self, x: &[f64]) -> Result<u8> {
            Ok(self.0[x[0] as usize])
        }
    }

    #[test]
    fn doubly_robust_examples() {
        let data = labeled(vec![1, 0, 1, 1, 0], vec![0.5, -1.0, 2.0, 0.3, 4.0]);
        let zero = |_: &[f64]| Ok(0.0);
        let half = |_: u8, _: &[f64]| Ok(0.5);
        let follow = Lookup(data.a.clone());
        let v = doubly_robust_value(&follow, &data, half, zero, zero).unwrap();
        let expected = data.y.iter().map(|y| 2.0 * y).sum::<f64>() / 5.0;
        assert!((v - expected).abs() < 1e-12);
        let oppose = Lookup(data.a.iter().map(|a| 1 - a).collect());
        assert_eq!(doubly_robust_value(&oppose, &data, half, zero, zero).unwrap(), 0.0);
        let bad = |_: u8, _: &[f64]| Ok(1.0);
        assert!(matches!(doubly_robust_value(&follow, &data, bad, zero, zero), Err(Error::Positivity(_))));
    }

    /// Monte Carlo value `E[g(X)(2 d(X) - 1)]` of the rule `d = 1{g > 0}`,
    /// i.e. `E|g(X)|`, the mean outcome when treating exactly where `g > 0`.
    fn oracle_value(spec: &ScenarioSpec, delta: f64, rho: &SimplexVector, draws: usize) -> f64 {
        let x = gen_target_covariates(spec, draws, 0xC0FFEE);
        x.rows().map(|r| target_effect(spec, r, delta, rho).unwrap().abs()).sum::<f64>() / draws as f64
    }

    #[test]
    fn doubly_robust_recovers_true_value() {
        let spec = ScenarioSpec::new(1).unwrap();
        let rho = SimplexVector::uniform(3);
        let delta = 0.75;
        let truth = oracle_value(&spec, delta, &rho, 1_000_000);
        let data = gen_target(&spec, 5000, delta, &rho, 21).unwrap();
        let g = |r: &[f64]| target_effect(&spec, r, delta, &rho);
        struct ByG(ScenarioSpec, f64, SimplexVector);
        impl Policy for ByG {
            fn decide(&self, x: &[f64]) -> Result<u8> {
                Ok(u8::from(target_effect(&self.0, x, self.1, &self.2)? > 0.0))
            }
        }
        let est = doubly_robust_value(&ByG(spec.clone(), delta, rho.clone()), &data, |_, _| Ok(0.5), g, |r| Ok(-g(r)?)).unwrap();
        assert!((est - truth).abs() <= 0.05, "{est} vs {truth}");
    }

    #[test]
    fn naive_examples() {
        let p = naive_policy(Fixed(vec![1.0, -2.0]), &[5, 5]).unwrap();
        assert_eq!(p.score(&[0.0]).unwrap(), -0.5);
        assert_eq!(p.decide(&[0.0]).unwrap(), 0);
        let p = naive_policy(Fixed(vec![1.0, -2.0]), &[3, 1]).unwrap();
        assert!((p.score(&[0.0]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(p.decide(&[0.0]).unwrap(), 1);
        for c in [-1.0, 0.0, 2.0] {
            assert_eq!(naive_policy(Fixed(vec![c]), &[7]).unwrap().decide(&[0.0]).unwrap(), u8::from(c > 0.0));
        }
        assert!(matches!(naive_policy(Fixed(vec![1.0, 2.0]), &[0, 0]), Err(Error::Input(_))));
    }

    #[test]
    fn naive_matches_pdro_when_sources_agree() {
        let pdro = PdroPolicy::new(0.3, SimplexVector::uniform(2), Fixed(vec![0.7, 0.7])).unwrap();
        let naive = naive_policy(Fixed(vec![0.7, 0.7]), &[2, 9]).unwrap();
        assert_eq!(pdro.decide(&[0.0]).unwrap(), naive.decide(&[0.0]).unwrap());
    }

    #[test]
    fn logistic_propensity_tracks_marginal_rate() {
        let spec = ScenarioSpec::new(1).unwrap();
        let mut rng = stream_rng(5, Stream::Treatments);
        let x = gen_target_covariates(&spec, 4000, 5);
        let a: Vec<u8> = (0..4000).map(|_| u8::from(rng.random::<f64>() < 0.3)).collect();
        let rate = a.iter().map(|&v| f64::from(v)).sum::<f64>() / 4000.0;
        let data = Dataset::new(x, a, vec![0.0; 4000], None).unwrap();
        let model = LogisticPropensity::fit(&data).unwrap();
        for row in data.x.rows().take(200) {
            assert!((model.raw_treated_prob(row).unwrap() - rate).abs() <= 0.05);
            let (p1, _) = model.arm_prob(1, row).unwrap();
            let (p0, _) = model.arm_prob(0, row).unwrap();
            assert!((p1 + p0 - 1.0).abs() < 1e-12);
        }
        let all_treated = Dataset::new(column(&[0.0, 1.0]), vec![1, 1], vec![0.0; 2], None).unwrap();
        assert!(matches!(LogisticPropensity::fit(&all_treated), Err(Error::ArmCoverage(_))));
    }
}
