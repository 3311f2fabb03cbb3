//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails.

use std::time::Instant;

use pdro_core::evaluation::{decisions, doubly_robust_value};
use pdro_core::experiment::{
    fit_replication_nuisances, run_experiment, simulate_replication, ExperimentConfig, ExperimentOutput, Method,
};
use pdro_core::learner::{fit_dro, fit_rho, mixture_weights, phi_h, Bandwidth, PdroPolicy, RhoFitConfig, SurrogateProblem};
use pdro_core::membership::{fit_softmax, predict_membership, SoftmaxConfig};
use pdro_core::nn::{estimate_source_cate, MlpConfig};
use pdro_core::optim::finite_diff_grad;
use pdro_core::rng::{stream_rng, Stream};
use pdro_core::synthetic::{
    gen_source, gen_source_with, gen_target, gen_target_covariates, sample_dirichlet_many, scenario_f, target_effect, true_membership,
    ScenarioSpec, SourceSampling,
};
use pdro_core::{Matrix, Nuisance, Policy, Result, SimplexVector};
use rand::Rng;

type Outcome = Result<(bool, String)>;

fn on_simplex(v: &[f64]) -> bool {
    (v.iter().sum::<f64>() - 1.0).abs() <= 1e-10 && v.iter().all(|&w| w >= 0.0)
}

/// Per-source CATEs `a + b x + c x^2` and a logistic first-source membership.
struct Analytic {
    coef: Vec<[f64; 3]>,
    slope: f64,
}

impl Analytic {
    fn random<R: Rng>(rng: &mut R, k: usize) -> Self {
        let coef = (0..k)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)])
            .collect();
        Self { coef, slope: rng.random_range(-2.0..2.0) }
    }
}

impl Nuisance for Analytic {
    fn num_sources(&self) -> usize {
        self.coef.len()
    }
    fn dim(&self) -> usize {
        1
    }
    fn cates(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.coef.iter().map(|c| c[0] + c[1] * x[0] + c[2] * x[0] * x[0]).collect())
    }
    fn membership(&self, x: &[f64]) -> Result<Vec<f64>> {
        let logits: Vec<f64> = (0..self.coef.len()).map(|s| if s == 0 { self.slope * x[0] } else { 0.0 }).collect();
        Ok(pdro_core::simplex::softmax(&logits))
    }
    fn outcomes(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.cates(x)?;
        Ok((c.iter().map(|v| v / 2.0).collect(), c.iter().map(|v| -v / 2.0).collect()))
    }
}

fn support<R: Rng>(rng: &mut R, m: usize) -> Matrix {
    Matrix::from_vec(m, 1, (0..m).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn criterion_1() -> Outcome {
    let mut ok = true;
    for h in [1e-3, 0.1, 0.5, 2.0] {
        let got: Vec<f64> = [-2.0, -1.0, 0.0, 1.0, 2.0].iter().map(|m| phi_h(m * h, h)).collect::<Result<_>>()?;
        ok &= got == [0.0, 0.0, 0.5, 1.0, 1.0];
    }
    let mut rng = stream_rng(101, Stream::Init);
    let mut checked = 0usize;
    let mut check = |v: &[f64]| {
        checked += 1;
        on_simplex(v)
    };
    for _ in 0..200 {
        let k = rng.random_range(2..6);
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-30.0..30.0)).collect();
        ok &= check(SimplexVector::from_logits(&z).as_slice());
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..5.0)).collect();
        ok &= check(SimplexVector::normalized(raw)?.as_slice());
        let omega = pdro_core::simplex::softmax(&z);
        let rho = SimplexVector::from_logits(&z.iter().rev().copied().collect::<Vec<_>>());
        ok &= check(&mixture_weights(&omega, &rho, rng.random_range(0.0..=1.0)));
    }
    for alpha in [0.01, 1.0, 50.0] {
        for d in sample_dirichlet_many(3, alpha, 200, 7)? {
            ok &= check(d.as_slice());
        }
    }
    let spec = ScenarioSpec::new(3)?;
    for row in gen_target_covariates(&spec, 100, 3).rows() {
        ok &= check(true_membership(&spec, row)?.as_slice());
    }
    let src = gen_source(&ScenarioSpec::new(1)?, 100, 5)?;
    let model = fit_softmax(&src.x, src.s.as_ref().unwrap(), 3, &SoftmaxConfig { epochs: 200, ..SoftmaxConfig::default() })?;
    for row in src.x.rows() {
        ok &= check(predict_membership(&model, row)?.as_slice());
    }
    for _ in 0..10 {
        let nu = Analytic::random(&mut rng, 3);
        let x = support(&mut rng, 20);
        ok &= check(fit_rho(&x, &nu, rng.random_range(0.0..1.0), 0.1, &RhoFitConfig::default())?.as_slice());
    }
    Ok((ok, format!("ramp values exact at 4 bandwidths; {checked} simplex vectors checked")))
}

fn criterion_2() -> Outcome {
    let mut rng = stream_rng(202, Stream::Init);
    let (mut checked, mut worst) = (0usize, 0.0f64);
    while checked < 20 {
        let k = 2 + checked % 2;
        let m = 20;
        let cates: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let prior: Vec<f64> = cates.chunks(k).map(|c| c[0] * 0.5 + c[k - 1] * 0.5).collect();
        let problem = SurrogateProblem::from_parts(cates, prior, k)?;
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let delta = rng.random_range(0.0..1.0);
        let h = rng.random_range(0.1..1.0);
        let rho = pdro_core::simplex::softmax(&z);
        if problem.scores(&rho, delta).iter().any(|f| (f.abs() - h).abs() < 1e-4) {
            continue;
        }
        let (_, g) = problem.objective(&z, delta, h)?;
        let fd = finite_diff_grad(|z| problem.objective(z, delta, h).map(|v| v.0).unwrap_or(f64::NAN), &z, 1e-6)?;
        for (a, n) in g.iter().zip(&fd) {
            worst = worst.max((a - n).abs() / a.abs().max(1e-3));
        }
        checked += 1;
    }
    Ok((worst <= 1e-4, format!("max relative error {worst:.2e} over {checked} instances")))
}

fn criterion_3() -> Outcome {
    let mut rng = stream_rng(303, Stream::Init);
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..10 {
        let nu = Analytic::random(&mut rng, 2);
        let x = support(&mut rng, 20);
        let delta = rng.random_range(0.0..1.0);
        let problem = SurrogateProblem::new(&x, &nu)?;
        let h = problem.bandwidth(Bandwidth::Auto, delta)?;
        let rho = problem.fit_rho(delta, h, &RhoFitConfig::default())?;
        let fitted = problem.value_at(rho.as_slice(), delta, h);
        let grid_min = (0..=1000)
            .map(|i| {
                let r = i as f64 / 1000.0;
                problem.value_at(&[r, 1.0 - r], delta, h)
            })
            .fold(f64::INFINITY, f64::min);
        worst_gap = worst_gap.max(fitted - grid_min);
    }
    Ok((worst_gap <= 1e-3, format!("max (fitted - grid minimum) = {worst_gap:.2e} over 10 instances")))
}

fn criterion_4() -> Outcome {
    let cfg = ExperimentConfig::default();
    let spec = ScenarioSpec::new(1)?;
    let data = simulate_replication(&cfg, &spec, 404)?;
    let nuisance = fit_replication_nuisances(&cfg, &data)?;
    let mut pooled = data.target_x.clone();
    for s in &data.sources {
        pooled = pooled.vstack(&s.x)?;
    }
    let h = SurrogateProblem::new(&pooled, &nuisance)?.bandwidth(Bandwidth::Auto, 0.0)?;
    let dro = fit_dro(&pooled, &nuisance, h, &cfg.rho_fit)?;
    let rho = fit_rho(&pooled, &nuisance, 0.0, h, &cfg.rho_fit)?;
    let pdro = PdroPolicy::new(0.0, rho.clone(), &nuisance)?;
    let test = gen_target_covariates(&spec, 1000, 405);
    let same_rho = dro.rho.as_slice().iter().zip(rho.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
    let same_decisions = decisions(&dro, &test)? == decisions(&pdro, &test)?;
    Ok((same_rho && same_decisions, format!("rho {:?}; 1000 decisions identical: {same_decisions}", dro.rho.as_slice())))
}

fn criterion_5() -> Outcome {
    let spec = ScenarioSpec::new(1)?;
    let src = gen_source_with(&spec, 10_000 / 3 + 1, 505, SourceSampling::Natural)?;
    let model = fit_softmax(&src.x, src.s.as_ref().unwrap(), 3, &SoftmaxConfig::default())?;
    let fresh = gen_target_covariates(&spec, 5000, 506);
    let mut mae = 0.0;
    for row in fresh.rows() {
        let est = predict_membership(&model, row)?;
        let truth = true_membership(&spec, row)?;
        mae += est.as_slice().iter().zip(truth.as_slice()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
    }
    mae /= fresh.nrows() as f64;

    let sources = gen_source(&spec, 2000, 507)?.split_by_source()?;
    let fresh = gen_source(&spec, 2000, 508)?.split_by_source()?;
    let mut rmses = Vec::new();
    for (s, data) in sources.iter().enumerate() {
        let cate = estimate_source_cate(data, &MlpConfig { seed: 509 + s as u64, ..MlpConfig::default() })?;
        let mut sse = 0.0;
        for row in fresh[s].x.rows() {
            sse += (cate.cate(row)? - 2.0 * scenario_f(&spec, s + 1, row)?).powi(2);
        }
        rmses.push((sse / fresh[s].len() as f64).sqrt());
    }
    let ok = mae <= 0.05 && rmses.iter().all(|&r| r <= 0.5);
    Ok((ok, format!("membership MAE {mae:.4}; CATE RMSE per source {rmses:.3?}")))
}

fn mean_worst(out: &ExperimentOutput, method: Method) -> f64 {
    out.summary.iter().find(|s| s.method == method).map_or(f64::NAN, |s| s.mean_worst_case_value)
}

fn table_reproduction(scenario: u8, margin: f64) -> Outcome {
    let cfg = ExperimentConfig { scenario, reps: 20, delta_true: 0.75, n_total: 2000, base_seed: 6000, ..ExperimentConfig::default() };
    let out = run_experiment(&cfg)?;
    let (p, n, d) = (mean_worst(&out, Method::Pdro), mean_worst(&out, Method::Naive), mean_worst(&out, Method::Dro));
    Ok((
        p - n >= margin && p - d >= margin,
        format!("mean worst-case value pdro {p:.3}, naive {n:.3}, dro {d:.3}; required margin {margin}"),
    ))
}

fn criterion_8() -> Outcome {
    let mut gaps = Vec::new();
    for delta_true in [0.1, 0.5, 0.9] {
        let cfg = ExperimentConfig {
            scenario: 1,
            reps: 10,
            delta_true,
            base_seed: 8000,
            methods: vec![Method::Pdro, Method::Dro],
            ..ExperimentConfig::default()
        };
        let out = run_experiment(&cfg)?;
        gaps.push(mean_worst(&out, Method::Pdro) - mean_worst(&out, Method::Dro));
    }
    Ok((gaps[2] > gaps[0], format!("pdro - dro gap at delta 0.1/0.5/0.9: {:.3}/{:.3}/{:.3}", gaps[0], gaps[1], gaps[2])))
}

fn criterion_9() -> Outcome {
    let mut means = Vec::new();
    for n_total in [500, 2000] {
        let cfg = ExperimentConfig {
            scenario: 1,
            reps: 10,
            n_total,
            delta_true: 0.75,
            base_seed: 9000,
            methods: vec![Method::Pdro],
            ..ExperimentConfig::default()
        };
        means.push(mean_worst(&run_experiment(&cfg)?, Method::Pdro));
    }
    Ok((means[1] > means[0], format!("pdro mean worst-case value n=500 {:.3}, n=2000 {:.3}", means[0], means[1])))
}

struct TreatWherePositive<'a> {
    spec: &'a ScenarioSpec,
    delta: f64,
    rho: &'a SimplexVector,
}

impl Policy for TreatWherePositive<'_> {
    fn decide(&self, x: &[f64]) -> Result<u8> {
        Ok(u8::from(target_effect(self.spec, x, self.delta, self.rho)? > 0.0))
    }
}

fn criterion_10() -> Outcome {
    let spec = ScenarioSpec::new(1)?;
    let (delta, rho) = (0.75, SimplexVector::uniform(3));
    let policy = TreatWherePositive { spec: &spec, delta, rho: &rho };
    // E[Y(d)] = E[g (2d - 1)] for d = 1{g > 0}.
    let oracle_x = gen_target_covariates(&spec, 1_000_000, 1010);
    let terms: Vec<f64> = oracle_x.rows().map(|r| target_effect(&spec, r, delta, &rho).map(f64::abs)).collect::<Result<_>>()?;
    let truth = terms.iter().sum::<f64>() / terms.len() as f64;
    let oracle_var = terms.iter().map(|t| (t - truth).powi(2)).sum::<f64>() / (terms.len() - 1) as f64;
    let oracle_se = (oracle_var / terms.len() as f64).sqrt();

    let g = |x: &[f64]| target_effect(&spec, x, delta, &rho);
    let mut estimates = Vec::with_capacity(200);
    for rep in 0..200u64 {
        let data = gen_target(&spec, 2000, delta, &rho, 10_000 + rep)?;
        estimates.push(doubly_robust_value(&policy, &data, |_, _| Ok(0.5), g, |x| Ok(-g(x)?))?);
    }
    let mean = estimates.iter().sum::<f64>() / 200.0;
    let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 199.0).sqrt();
    let se = (sd * sd / 200.0 + oracle_se * oracle_se).sqrt();
    Ok((
        (mean - truth).abs() <= 2.0 * se,
        format!("replication mean {mean:.4}, oracle {truth:.4}, |diff| {:.4} vs 2 SE {:.4}", (mean - truth).abs(), 2.0 * se),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("surrogate and simplex values", criterion_1),
        ("gradient matches finite differences", criterion_2),
        ("fitted rho matches grid oracle", criterion_3),
        ("dro equals pdro at delta 0", criterion_4),
        ("nuisance recovery", criterion_5),
        ("scenario 1 worst-case gaps", || table_reproduction(1, 0.15)),
        ("scenario 2 worst-case gaps", || table_reproduction(2, 0.2)),
        ("advantage grows with delta", criterion_8),
        ("value grows with sample size", criterion_9),
        ("doubly robust estimator unbiased", criterion_10),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!pass);
        println!(
            "criterion {id:>2} {}: {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
