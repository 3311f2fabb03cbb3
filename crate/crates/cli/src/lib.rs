//! Subcommands of the `pdro` binary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pdro_core::dataset::{read_covariates_csv_path, Dataset};
use pdro_core::evaluation::{decisions, doubly_robust_from_parts, EvalReport, LogisticPropensity};
use pdro_core::experiment::{run_experiment_with_jobs, ExperimentConfig, Method, RhoKeyword, RhoTrue};
use pdro_core::learner::{
    fit_nuisances, mixture_weights, tune_delta, Bandwidth, DeltaSelection, RhoFitConfig, SurrogateProblem,
};
use pdro_core::membership::SoftmaxConfig;
use pdro_core::nn::MlpConfig;
use pdro_core::synthetic::{gen_source_with, gen_target, gen_target_covariates, ScenarioSpec, SourceSampling};
use pdro_core::{Error, Nuisance, PdroPolicy, Result, SimplexVector};

#[derive(Debug, Parser)]
#[command(name = "pdro", version, about = "Distributionally robust treatment rules from multiple source populations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic source or target data as CSV.
    Simulate(SimulateArgs),
    /// Fit nuisances and a robust policy from labeled source data.
    Fit(FitArgs),
    /// Score covariate rows with a fitted policy.
    Score(ScoreArgs),
    /// Doubly robust value of a fitted policy on labeled target data.
    DrEval(DrEvalArgs),
    /// Run simulation replications and write a results table.
    RunExperiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    pub scenario: u8,
    /// Rows per source, or total target rows with `--target`.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Draw a target sample from the mixture outcome model instead of sources.
    #[arg(long)]
    pub target: bool,
    /// With `--target`: write covariate columns only.
    #[arg(long, requires = "target")]
    pub unlabeled: bool,
    #[arg(long, default_value_t = 0.75)]
    pub delta: f64,
    /// Comma-separated target mixture weights.
    #[arg(long, default_value = "0.3333333333333333,0.3333333333333333,0.3333333333333334")]
    pub rho: String,
    /// Natural categorical source sizes instead of equal quotas.
    #[arg(long)]
    pub unequal: bool,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Labeled source data with an `s` column.
    #[arg(long)]
    pub train: PathBuf,
    /// Labeled target rows used to tune delta.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Unlabeled target covariates added to the pooled sample.
    #[arg(long)]
    pub target_covariates: Option<PathBuf>,
    /// Fixed delta, used when no calibration file is given.
    #[arg(long, default_value_t = 0.5)]
    pub delta: f64,
    /// Fixed surrogate bandwidth (default: data-driven).
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub policy: PathBuf,
    /// CSV with `x1..xp` columns; other columns are ignored.
    #[arg(long)]
    pub covariates: PathBuf,
    /// Output CSV (default: stdout).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DrEvalArgs {
    #[arg(long)]
    pub policy: PathBuf,
    /// Labeled target data with `a` and `y` columns.
    #[arg(long)]
    pub data: PathBuf,
    /// `constant:<p>` or `logistic`.
    #[arg(long, default_value = "constant:0.5")]
    pub propensity: String,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// JSON config; fields not given take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenario: Option<u8>,
    #[arg(long)]
    pub n_total: Option<usize>,
    #[arg(long)]
    pub delta_true: Option<f64>,
    /// `dirichlet` or comma-separated weights.
    #[arg(long)]
    pub rho_true: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub calibration_size: Option<usize>,
    /// Comma-separated delta grid.
    #[arg(long)]
    pub delta_grid: Option<String>,
    #[arg(long)]
    pub h_override: Option<f64>,
    #[arg(long)]
    pub alpha_dirichlet: Option<f64>,
    #[arg(long)]
    pub n_draws: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub base_seed: Option<u64>,
    /// Comma-separated subset of pdro,dro,naive.
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long, short)]
    pub output: Option<String>,
    #[arg(long)]
    pub unequal: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

/// Serialized output of `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyArtifact {
    pub policy: PdroPolicy,
    pub bandwidth: f64,
    /// `(delta, calibration error)` per grid point when delta was tuned.
    pub calibration_path: Option<Vec<(f64, f64)>>,
}

impl PolicyArtifact {
    pub fn load(path: &Path) -> Result<Self> {
        let artifact: Self = serde_json::from_reader(io::BufReader::new(File::open(path)?))?;
        artifact.policy.nuisance.validate()?;
        Ok(artifact)
    }
}

fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad number `{t}`: {e}"))))
        .collect()
}

fn parse_simplex(text: &str) -> Result<SimplexVector> {
    SimplexVector::new(parse_list(text)?).map_err(|e| Error::Config(e.to_string()))
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let spec = ScenarioSpec::new(args.scenario)?;
    if !args.target {
        let sampling = if args.unequal { SourceSampling::Natural } else { SourceSampling::EqualQuota };
        return gen_source_with(&spec, args.n, args.seed, sampling)?.write_csv_path(&args.output);
    }
    if args.unlabeled {
        let x = gen_target_covariates(&spec, args.n, args.seed);
        let mut w = io::BufWriter::new(File::create(&args.output)?);
        let header: Vec<String> = (1..=spec.dim_p).map(|j| format!("x{j}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in x.rows() {
            writeln!(w, "{}", row.iter().map(f64::to_string).collect::<Vec<_>>().join(","))?;
        }
        return Ok(w.flush()?);
    }
    gen_target(&spec, args.n, args.delta, &parse_simplex(&args.rho)?, args.seed)?.write_csv_path(&args.output)
}

pub fn fit(args: &FitArgs) -> Result<PolicyArtifact> {
    let train = Dataset::read_csv_path(&args.train)?;
    if train.s.is_none() {
        return Err(Error::Input(format!("{} has no `s` column", args.train.display())));
    }
    let sources = train.split_by_source()?;
    let mut mlp = MlpConfig { seed: args.seed, ..MlpConfig::default() };
    if let Some(e) = args.epochs {
        mlp.epochs = e;
    }
    let nuisance = fit_nuisances(&sources, &mlp, &SoftmaxConfig::default())?;
    let mut pooled = train.x.clone();
    if let Some(path) = &args.target_covariates {
        pooled = pooled.vstack(&read_covariates_csv_path(path)?)?;
    }
    let problem = SurrogateProblem::new(&pooled, &nuisance)?;
    let bandwidth = args.h.map_or(Bandwidth::Auto, Bandwidth::Fixed);
    let rho_cfg = RhoFitConfig::default();
    let (delta, rho, h, calibration_path) = match &args.calibration {
        Some(path) => {
            let cal = Dataset::read_csv_path(path)?;
            let grid = pdro_core::learner::default_delta_grid();
            let DeltaSelection { delta, rho, bandwidth, path } =
                tune_delta(&cal, &nuisance, &problem, bandwidth, &grid, &rho_cfg)?;
            (delta, rho, bandwidth, Some(path.into_iter().map(|(d, _, e)| (d, e)).collect()))
        }
        None => {
            let h = problem.bandwidth(bandwidth, args.delta)?;
            (args.delta, problem.fit_rho(args.delta, h, &rho_cfg)?, h, None)
        }
    };
    let artifact = PolicyArtifact { policy: PdroPolicy::new(delta, rho, nuisance)?, bandwidth: h, calibration_path };
    std::fs::write(&args.output, serde_json::to_string(&artifact)?)?;
    Ok(artifact)
}

pub fn score<W: Write>(args: &ScoreArgs, out: W) -> Result<()> {
    let artifact = PolicyArtifact::load(&args.policy)?;
    let x = read_covariates_csv_path(&args.covariates)?;
    let policy = &artifact.policy;
    if x.ncols() != policy.dim() && !x.is_empty() {
        return Err(Error::Dimension(format!("policy expects {} covariates, file has {}", policy.dim(), x.ncols())));
    }
    let mut w = io::BufWriter::new(out);
    writeln!(w, "decision,score")?;
    for row in x.rows() {
        let s = policy.score(row)?;
        writeln!(w, "{},{}", u8::from(s > 0.0), s)?;
    }
    Ok(w.flush()?)
}

/// Propensity source for `dr-eval`.
#[derive(Debug, Clone, PartialEq)]
pub enum PropensityMode {
    Constant(f64),
    Logistic,
}

impl std::str::FromStr for PropensityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "logistic" {
            return Ok(Self::Logistic);
        }
        let p = s
            .strip_prefix("constant:")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::Config(format!("propensity must be `constant:<p>` or `logistic`, got `{s}`")))?;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Config(format!("constant propensity must lie in (0, 1), got {p}")));
        }
        Ok(Self::Constant(p))
    }
}

/// Outcome regressions `sum_s W_s(x) f_a^(s)(x)` under the policy's mixture.
fn mixture_outcomes<N: Nuisance>(policy: &PdroPolicy<N>, x: &[f64]) -> Result<(f64, f64)> {
    let w = mixture_weights(&policy.nuisance.membership(x)?, &policy.rho, policy.delta);
    let (f1, f0) = policy.nuisance.outcomes(x)?;
    let dot = |f: &[f64]| w.iter().zip(f).map(|(w, f)| w * f).sum::<f64>();
    Ok((dot(&f1), dot(&f0)))
}

pub fn dr_eval(args: &DrEvalArgs) -> Result<EvalReport> {
    let mode: PropensityMode = args.propensity.parse()?;
    let artifact = PolicyArtifact::load(&args.policy)?;
    let policy = &artifact.policy;
    let data = Dataset::read_csv_path(&args.data)?;
    if data.dim() != policy.dim() {
        return Err(Error::Dimension(format!("policy expects {} covariates, file has {}", policy.dim(), data.dim())));
    }
    let d = decisions(policy, &data.x)?;
    let (mut f1, mut f0) = (Vec::with_capacity(data.len()), Vec::with_capacity(data.len()));
    for row in data.x.rows() {
        let (a, b) = mixture_outcomes(policy, row)?;
        f1.push(a);
        f0.push(b);
    }
    let mut clipped = 0usize;
    let propensity: Vec<f64> = match mode {
        PropensityMode::Constant(p) => data.a.iter().map(|&a| if a == 1 { p } else { 1.0 - p }).collect(),
        PropensityMode::Logistic => {
            let model = LogisticPropensity::fit(&data)?;
            let mut out = Vec::with_capacity(data.len());
            for (i, row) in data.x.rows().enumerate() {
                let (p, c) = model.arm_prob(data.a[i], row)?;
                clipped += usize::from(c);
                out.push(p);
            }
            out
        }
    };
    let value = doubly_robust_from_parts(&data, &d, &propensity, &f1, &f0)?;
    let mut metadata = BTreeMap::new();
    metadata.insert("propensity".into(), args.propensity.clone());
    metadata.insert("clip_fraction".into(), (clipped as f64 / data.len() as f64).to_string());
    metadata.insert("delta".into(), policy.delta.to_string());
    metadata.insert("h".into(), artifact.bandwidth.to_string());
    metadata.insert("treated_fraction".into(), (d.iter().map(|&v| v as usize).sum::<usize>() as f64 / d.len() as f64).to_string());
    Ok(EvalReport {
        method_name: "pdro".into(),
        policy_value: value,
        worst_case_value: None,
        n_test: data.len(),
        rho_draws: 0,
        metadata,
    })
}

pub fn experiment_config(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = args.scenario {
        cfg.scenario = v;
    }
    if let Some(v) = args.n_total {
        cfg.n_total = v;
    }
    if let Some(v) = args.delta_true {
        cfg.delta_true = v;
    }
    if let Some(v) = &args.rho_true {
        cfg.rho_true = if v == "dirichlet" { RhoTrue::Named(RhoKeyword::Dirichlet) } else { RhoTrue::Fixed(parse_simplex(v)?) };
    }
    if let Some(v) = args.reps {
        cfg.reps = v;
    }
    if let Some(v) = args.calibration_size {
        cfg.calibration_size = v;
    }
    if let Some(v) = &args.delta_grid {
        cfg.delta_grid = parse_list(v)?;
    }
    if args.h_override.is_some() {
        cfg.h_override = args.h_override;
    }
    if let Some(v) = args.alpha_dirichlet {
        cfg.alpha_dirichlet = v;
    }
    if let Some(v) = args.n_draws {
        cfg.n_draws = v;
    }
    if let Some(v) = args.n_test {
        cfg.n_test = v;
    }
    if let Some(v) = args.base_seed {
        cfg.base_seed = v;
    }
    if let Some(v) = &args.methods {
        cfg.methods = v.split(',').map(|m| m.trim().parse::<Method>()).collect::<Result<_>>()?;
    }
    if let Some(v) = &args.output {
        cfg.output_path = v.clone();
    }
    cfg.unequal |= args.unequal;
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_experiment_command<W: Write>(args: &ExperimentArgs, mut out: W) -> Result<()> {
    let cfg = experiment_config(args)?;
    let result = run_experiment_with_jobs(&cfg, args.jobs)?;
    result.write_files(Path::new(&cfg.output_path))?;
    write!(out, "{}", result.summary_table())?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let stdout = io::stdout();
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Fit(a) => {
            let art = fit(&a)?;
            let p = &art.policy;
            println!("delta={} rho={:?} h={}", p.delta, p.rho.as_slice(), art.bandwidth);
            Ok(())
        }
        Command::Score(a) => match &a.output {
            Some(path) => score(&a, File::create(path)?),
            None => score(&a, stdout.lock()),
        },
        Command::DrEval(a) => {
            let report = dr_eval(&a)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::RunExperiment(a) => run_experiment_command(&a, stdout.lock()),
    }
}
