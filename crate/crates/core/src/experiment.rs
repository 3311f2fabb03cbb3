//! End-to-end simulation replications: generate sources and target samples,
//! fit nuisances and every requested rule, evaluate against the true CATE.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{decisions, naive_policy, WorstCaseDesign};
use crate::learner::{
    default_delta_grid, fit_nuisances, tune_delta, Bandwidth, NuisanceSet, PdroPolicy, RhoFitConfig, SurrogateProblem,
};
use crate::matrix::Matrix;
use crate::membership::SoftmaxConfig;
use crate::nn::MlpConfig;
use crate::rng::derive_seed;
use crate::simplex::SimplexVector;
use crate::synthetic::{
    gen_source_with, gen_target, gen_target_covariates, sample_dirichlet_many, ScenarioSpec, SourceSampling, NUM_SOURCES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pdro,
    Dro,
    Naive,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Pdro, Method::Dro, Method::Naive];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pdro => "pdro",
            Method::Dro => "dro",
            Method::Naive => "naive",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected pdro, dro or naive)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhoKeyword {
    Dirichlet,
}

/// Target mixture weights: fixed, or the first Dirichlet draw of each replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RhoTrue {
    Fixed(SimplexVector),
    Named(RhoKeyword),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: u8,
    /// Split equally over the sources and the unlabeled target sample.
    pub n_total: usize,
    pub delta_true: f64,
    pub rho_true: RhoTrue,
    pub reps: usize,
    pub calibration_size: usize,
    pub delta_grid: Vec<f64>,
    pub h_override: Option<f64>,
    pub alpha_dirichlet: f64,
    pub n_draws: usize,
    pub n_test: usize,
    pub base_seed: u64,
    pub methods: Vec<Method>,
    pub output_path: String,
    /// Natural categorical source sizes instead of equal quotas.
    pub unequal: bool,
    pub mlp: MlpConfig,
    pub softmax: SoftmaxConfig,
    pub rho_fit: RhoFitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: 1,
            n_total: 2000,
            delta_true: 0.75,
            rho_true: RhoTrue::Named(RhoKeyword::Dirichlet),
            reps: 200,
            calibration_size: 25,
            delta_grid: default_delta_grid(),
            h_override: None,
            alpha_dirichlet: 1.0,
            n_draws: 100,
            n_test: 1000,
            base_seed: 1,
            methods: Method::ALL.to_vec(),
            output_path: "results.csv".into(),
            unequal: false,
            mlp: MlpConfig::default(),
            softmax: SoftmaxConfig::default(),
            rho_fit: RhoFitConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn per_source(&self) -> usize {
        self.n_total / (NUM_SOURCES + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(1..=4).contains(&self.scenario) {
            return fail(format!("scenario must be 1-4, got {}", self.scenario));
        }
        if self.n_total == 0 || self.n_total % (NUM_SOURCES + 1) != 0 {
            return fail(format!(
                "n_total = {} must be a positive multiple of {} (one share per source plus the target)",
                self.n_total,
                NUM_SOURCES + 1
            ));
        }
        if self.per_source() < 4 {
            return fail("n_total leaves fewer than 4 rows per source".into());
        }
        if !(0.0..=1.0).contains(&self.delta_true) {
            return fail(format!("delta_true must lie in [0, 1], got {}", self.delta_true));
        }
        if let RhoTrue::Fixed(rho) = &self.rho_true {
            if rho.len() != NUM_SOURCES {
                return fail(format!("rho_true must have {NUM_SOURCES} entries"));
            }
        }
        if self.reps == 0 {
            return fail("reps must be positive".into());
        }
        if self.calibration_size < 2 {
            return fail("calibration_size must be at least 2".into());
        }
        if self.delta_grid.is_empty() || self.delta_grid.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return fail("delta_grid must be a nonempty list of values in [0, 1]".into());
        }
        if let Some(h) = self.h_override {
            if !(h > 0.0 && h.is_finite()) {
                return fail(format!("h_override must be positive, got {h}"));
            }
        }
        if !(self.alpha_dirichlet > 0.0 && self.alpha_dirichlet.is_finite()) {
            return fail(format!("alpha_dirichlet must be positive, got {}", self.alpha_dirichlet));
        }
        if self.n_draws == 0 || self.n_test == 0 {
            return fail("n_draws and n_test must be positive".into());
        }
        if self.methods.is_empty() {
            return fail("at least one method is required".into());
        }
        Ok(())
    }

    fn bandwidth(&self) -> Bandwidth {
        self.h_override.map_or(Bandwidth::Auto, Bandwidth::Fixed)
    }
}

/// One CSV row: `scenario,method,n,delta_true,rep,policy_value,worst_case_value,seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: u8,
    pub method: Method,
    pub n: usize,
    pub delta_true: f64,
    pub rep: usize,
    pub policy_value: f64,
    pub worst_case_value: f64,
    pub seed: u64,
}

/// Per-replication quantities that are not part of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMeta {
    pub rep: usize,
    pub seed: u64,
    pub rho_true: SimplexVector,
    pub source_sizes: Vec<usize>,
    pub delta_hat: Option<f64>,
    pub rho_hat: Option<SimplexVector>,
    pub bandwidth: Option<f64>,
    pub dro_rho: Option<SimplexVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub reps: usize,
    pub mean_policy_value: f64,
    pub sd_policy_value: f64,
    pub mean_worst_case_value: f64,
    pub sd_worst_case_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub rows: Vec<ResultRow>,
    pub replications: Vec<ReplicationMeta>,
    pub summary: Vec<MethodSummary>,
}

/// Everything one replication draws before any fitting.
pub struct ReplicationData {
    pub seed: u64,
    pub sources: Vec<Dataset>,
    pub target_x: Matrix,
    pub calibration: Dataset,
    pub rho_true: SimplexVector,
    pub draws: Vec<SimplexVector>,
    pub design: WorstCaseDesign,
}

pub fn replication_seed(config: &ExperimentConfig, rep: usize) -> u64 {
    config.base_seed.wrapping_add(rep as u64)
}

pub fn simulate_replication(config: &ExperimentConfig, spec: &ScenarioSpec, seed: u64) -> Result<ReplicationData> {
    let sampling = if config.unequal { SourceSampling::Natural } else { SourceSampling::EqualQuota };
    let pooled = gen_source_with(spec, config.per_source(), derive_seed(seed, 1), sampling)?;
    let sources = pooled.split_by_source()?;
    let draws = sample_dirichlet_many(NUM_SOURCES, config.alpha_dirichlet, config.n_draws, derive_seed(seed, 2))?;
    let rho_true = match &config.rho_true {
        RhoTrue::Fixed(rho) => rho.clone(),
        RhoTrue::Named(RhoKeyword::Dirichlet) => draws[0].clone(),
    };
    let target_x = gen_target_covariates(spec, config.per_source(), derive_seed(seed, 3));
    let calibration = gen_target(spec, config.calibration_size, config.delta_true, &rho_true, derive_seed(seed, 4))?;
    let design = WorstCaseDesign::sample(spec, config.delta_true, config.n_test, derive_seed(seed, 5))?;
    Ok(ReplicationData { seed, sources, target_x, calibration, rho_true, draws, design })
}

pub fn fit_replication_nuisances(config: &ExperimentConfig, data: &ReplicationData) -> Result<NuisanceSet> {
    let mlp = MlpConfig { seed: derive_seed(data.seed, 6), ..config.mlp.clone() };
    fit_nuisances(&data.sources, &mlp, &config.softmax)
}

fn run_replication(config: &ExperimentConfig, spec: &ScenarioSpec, rep: usize) -> Result<(Vec<ResultRow>, ReplicationMeta)> {
    let seed = replication_seed(config, rep);
    let data = simulate_replication(config, spec, seed)?;
    let nuisance = fit_replication_nuisances(config, &data)?;
    let mut pooled = data.target_x.clone();
    for s in &data.sources {
        pooled = pooled.vstack(&s.x)?;
    }
    let problem = SurrogateProblem::new(&pooled, &nuisance)?;
    let sizes: Vec<usize> = data.sources.iter().map(Dataset::len).collect();
    let mut meta = ReplicationMeta {
        rep,
        seed,
        rho_true: data.rho_true.clone(),
        source_sizes: sizes.clone(),
        delta_hat: None,
        rho_hat: None,
        bandwidth: None,
        dro_rho: None,
    };
    let mut rows = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let d = match method {
            Method::Pdro => {
                let sel = tune_delta(
                    &data.calibration,
                    &nuisance,
                    &problem,
                    config.bandwidth(),
                    &config.delta_grid,
                    &config.rho_fit,
                )?;
                meta.delta_hat = Some(sel.delta);
                meta.rho_hat = Some(sel.rho.clone());
                meta.bandwidth = Some(sel.bandwidth);
                decisions(&PdroPolicy::new(sel.delta, sel.rho, &nuisance)?, &data.design.x_test)?
            }
            Method::Dro => {
                let h = problem.bandwidth(config.bandwidth(), 0.0)?;
                let rho = problem.fit_rho(0.0, h, &config.rho_fit)?;
                meta.dro_rho = Some(rho.clone());
                decisions(&PdroPolicy::new(0.0, rho, &nuisance)?, &data.design.x_test)?
            }
            Method::Naive => decisions(&naive_policy(&nuisance, &sizes)?, &data.design.x_test)?,
        };
        rows.push(ResultRow {
            scenario: spec.id,
            method,
            n: config.n_total,
            delta_true: config.delta_true,
            rep,
            policy_value: data.design.value(&d, &data.rho_true)?,
            worst_case_value: data.design.worst_case(&d, &data.draws)?,
            seed,
        });
    }
    Ok((rows, meta))
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

pub fn summarize(rows: &[ResultRow], methods: &[Method]) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|&method| {
            let mine: Vec<&ResultRow> = rows.iter().filter(|r| r.method == method).collect();
            let (mean_policy_value, sd_policy_value) = mean_sd(&mine.iter().map(|r| r.policy_value).collect::<Vec<_>>());
            let (mean_worst_case_value, sd_worst_case_value) =
                mean_sd(&mine.iter().map(|r| r.worst_case_value).collect::<Vec<_>>());
            MethodSummary {
                method,
                reps: mine.len(),
                mean_policy_value,
                sd_policy_value,
                mean_worst_case_value,
                sd_worst_case_value,
            }
        })
        .collect()
}

/// Runs every replication on the current rayon pool; output is in
/// replication order and independent of the pool size.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let spec = ScenarioSpec::new(config.scenario)?;
    let per_rep = (0..config.reps)
        .into_par_iter()
        .map(|rep| run_replication(config, &spec, rep))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(config.reps * config.methods.len());
    let mut replications = Vec::with_capacity(config.reps);
    for (r, m) in per_rep {
        rows.extend(r);
        replications.push(m);
    }
    let summary = summarize(&rows, &config.methods);
    Ok(ExperimentOutput { config: config.clone(), rows, replications, summary })
}

/// [`run_experiment`] on a dedicated pool of `jobs` threads (0 = rayon default).
pub fn run_experiment_with_jobs(config: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run_experiment(config))
}

impl ExperimentOutput {
    pub fn write_results_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Input(e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record(["scenario", "method", "n", "delta_true", "rep", "policy_value", "worst_case_value", "seed"])
                .map_err(|e| Error::Input(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the results CSV to `path` and the full config plus per-replication
    /// details to `<path>.meta.json`.
    pub fn write_files(&self, path: &Path) -> Result<()> {
        self.write_results_csv(std::fs::File::create(path)?)?;
        let mut meta_path = path.as_os_str().to_owned();
        meta_path.push(".meta.json");
        let meta = serde_json::json!({
            "config": self.config,
            "replications": self.replications,
            "summary": self.summary,
        });
        std::fs::write(meta_path, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "scenario {} n={} delta_true={} reps={}\n{:<8}{:>14}{:>12}{:>14}{:>12}\n",
            self.config.scenario,
            self.config.n_total,
            self.config.delta_true,
            self.config.reps,
            "method",
            "worst_mean",
            "worst_sd",
            "value_mean",
            "value_sd"
        );
        for m in &self.summary {
            s.push_str(&format!(
                "{:<8}{:>14.4}{:>12.4}{:>14.4}{:>12.4}\n",
                m.method.name(),
                m.mean_worst_case_value,
                m.sd_worst_case_value,
                m.mean_policy_value,
                m.sd_policy_value
            ));
        }
        s
    }
}
