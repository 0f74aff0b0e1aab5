//! Command-line entry point: `simulate`, `estimate`, and `benchmark`
//! subcommands, flag/config-file resolution, and output writing.
//!
//! Configuration may come from a flat `key = value` text file via
//! `--config`; command-line flags override file entries, which override the
//! documented defaults. All randomness flows from the single `--seed`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{make_folds, Cell, Dataset, OutcomeKind, Table};
use crate::estimators::{
    apply_control_variate, cv_statistic, estimate_gamma, fit_baseline, one_step_m4, one_step_m5,
    CvProbes, EstimateReport, Method,
};
use crate::influence::EstimandKind;
use crate::nuisance::{
    cross_fit, fit_full, IrlsOptions, LearnedSpec, LearnerSpec, PsiSpec, RestrictionSpec,
    VarianceSpec,
};
use crate::simulation::{
    derive_seed, generate, run_benchmark, BenchmarkConfig, ScenarioKind, ScenarioSpec, Variant,
    STREAM_REPLICATE,
};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config: exit code 1.
    Validation(String),
    /// Failure while running the pipeline: exit code 2.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

macro_rules! runtime_from {
    ($t:ty) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    };
}
runtime_from!(crate::dataset::DatasetError);
runtime_from!(crate::nuisance::NuisanceError);
runtime_from!(crate::estimators::EstimatorError);
runtime_from!(crate::simulation::SimulationError);
runtime_from!(std::io::Error);

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

#[derive(Parser, Debug)]
#[command(
    name = "fusionest",
    version,
    about = "Treatment-effect estimation fusing a randomized experiment with a biased observational dataset",
    after_help = "Config file: flat `key = value` lines using the long flag names; \
flags override file entries. Defaults are listed per flag."
)]
pub struct Cli {
    /// Optional key=value config file; flags override file entries.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Print the effective configuration in config-file format and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw a synthetic fused dataset and write it as CSV.
    Simulate(SimulateArgs),
    /// Estimate treatment effects from a fused-dataset CSV.
    Estimate(EstimateArgs),
    /// Monte Carlo benchmark of the estimators on a synthetic scenario.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug, Default)]
pub struct SimulateArgs {
    /// Scenario: discrete | continuous | m4_synthetic [default: discrete]
    #[arg(long)]
    pub scenario: Option<String>,
    /// Homoskedastic variant of the m4_synthetic scenario [default: false]
    #[arg(long)]
    pub m4_homoskedastic: Option<bool>,
    /// Experimental sample size [default: 3000]
    #[arg(long)]
    pub n_rct: Option<usize>,
    /// Observational sample size retained after selection [default: 3000]
    #[arg(long)]
    pub m_obs: Option<usize>,
    /// Selection keep probability for cases (y=1) [default: 0.9]
    #[arg(long)]
    pub case_keep: Option<f64>,
    /// Selection keep probability for controls (y=0) [default: 0.1]
    #[arg(long)]
    pub control_keep: Option<f64>,
    /// Base RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV path [default: dataset.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct EstimateArgs {
    /// Input CSV with header s,z,y,x1,...,xd (required)
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Outcome model: binary | continuous [default: binary]
    #[arg(long)]
    pub outcome: Option<String>,
    /// Estimand kinds, comma-separated: rct,obs,tgt [default: rct,obs,tgt]
    #[arg(long)]
    pub kinds: Option<String>,
    /// Methods, comma-separated: baseline,eff_m4,eff_m5,cv
    /// [default: baseline plus the restriction's one-step estimator]
    #[arg(long)]
    pub methods: Option<String>,
    /// Outcome-mean restriction: none | m4 | m5 [default: none]
    #[arg(long)]
    pub restriction: Option<String>,
    /// Confounding basis for m4, e.g. intercept,x1,x2
    /// [default: intercept plus every covariate]
    #[arg(long)]
    pub psi: Option<String>,
    /// Learner for p: cell_mean | irls:<degree> | known:<value> [default: cell_mean]
    #[arg(long)]
    pub p_learner: Option<String>,
    /// Learner for e [default: cell_mean]
    #[arg(long)]
    pub e_learner: Option<String>,
    /// Learner for q [default: cell_mean]
    #[arg(long)]
    pub q_learner: Option<String>,
    /// Learner applied to any outcome mean without its own flag [default: cell_mean]
    #[arg(long)]
    pub m_learner: Option<String>,
    /// Learner for m10 [default: --m-learner]
    #[arg(long)]
    pub m10_learner: Option<String>,
    /// Learner for m01 [default: --m-learner]
    #[arg(long)]
    pub m01_learner: Option<String>,
    /// Learner for m00 [default: --m-learner]
    #[arg(long)]
    pub m00_learner: Option<String>,
    /// Learner for m11 (used only under restriction none) [default: --m-learner]
    #[arg(long)]
    pub m11_learner: Option<String>,
    /// Number of cross-fitting folds [default: 5]
    #[arg(long)]
    pub k: Option<usize>,
    /// Base RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Control-variate probes: discrete | continuous [default: discrete when
    /// every covariate is binary, else continuous]
    #[arg(long)]
    pub cv_probes: Option<String>,
    /// Comma-separated adjustment factor for cv, e.g. 0.1,0.0,0.2,0.1
    #[arg(long)]
    pub cv_gamma: Option<String>,
    /// Estimate the cv adjustment factor from this many bootstrap
    /// replicates of the dataset [default: off]
    #[arg(long)]
    pub cv_bootstrap: Option<usize>,
    /// Optional output CSV for the estimates
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct BenchmarkArgs {
    /// Scenario: discrete | continuous | m4_synthetic [default: discrete]
    #[arg(long)]
    pub scenario: Option<String>,
    /// Homoskedastic variant of the m4_synthetic scenario [default: false]
    #[arg(long)]
    pub m4_homoskedastic: Option<bool>,
    /// Experimental sample size [default: 3000]
    #[arg(long)]
    pub n_rct: Option<usize>,
    /// Observational sample size [default: 3000]
    #[arg(long)]
    pub m_obs: Option<usize>,
    /// Selection keep probability for cases [default: 0.9]
    #[arg(long)]
    pub case_keep: Option<f64>,
    /// Selection keep probability for controls [default: 0.1]
    #[arg(long)]
    pub control_keep: Option<f64>,
    /// Methods, comma-separated [default: baseline,eff_m5,cv;
    /// baseline,eff_m4 for m4_synthetic]
    #[arg(long)]
    pub methods: Option<String>,
    /// Estimand kinds, comma-separated [default: rct,obs,tgt]
    #[arg(long)]
    pub kinds: Option<String>,
    /// Variants, comma-separated: feasible,oracle [default: feasible,oracle]
    #[arg(long)]
    pub variants: Option<String>,
    /// Monte Carlo replicates [default: 1000]
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Bootstrap resamples for the confidence intervals [default: 1000]
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// Number of cross-fitting folds [default: 5]
    #[arg(long)]
    pub k: Option<usize>,
    /// Base RNG seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; falls back to FUSIONEST_JOBS, then all cores [default: 0 = all]
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory for replicates.csv, summary.csv, summary.json [default: bench_out]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Config file handling
// ---------------------------------------------------------------------------

fn load_config_file(path: &Path) -> Result<HashMap<String, String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| invalid(format!("cannot read config file {}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            invalid(format!(
                "config line {} is not `key = value`: `{raw}`",
                lineno + 1
            ))
        })?;
        map.insert(key.trim().replace('_', "-"), value.trim().to_string());
    }
    Ok(map)
}

struct Resolver {
    file: HashMap<String, String>,
    known: &'static [&'static str],
}

impl Resolver {
    fn new(file: HashMap<String, String>, known: &'static [&'static str]) -> Result<Self, CliError> {
        for key in file.keys() {
            if !known.contains(&key.as_str()) {
                return Err(invalid(format!(
                    "unknown config key `{key}`; known keys: {}",
                    known.join(", ")
                )));
            }
        }
        Ok(Resolver { file, known })
    }

    fn raw(&self, key: &str) -> Option<&String> {
        debug_assert!(self.known.contains(&key), "unregistered key {key}");
        self.file.get(key)
    }

    fn parsed<T, F>(&self, cli: Option<T>, key: &str, parse: F) -> Result<Option<T>, CliError>
    where
        F: Fn(&str) -> Result<T, String>,
    {
        if cli.is_some() {
            return Ok(cli);
        }
        match self.raw(key) {
            Some(text) => parse(text)
                .map(Some)
                .map_err(|e| invalid(format!("config key `{key}`: {e}"))),
            None => Ok(None),
        }
    }

    fn get<T, F>(&self, cli: Option<T>, key: &str, parse: F, default: T) -> Result<T, CliError>
    where
        F: Fn(&str) -> Result<T, String>,
    {
        Ok(self.parsed(cli, key, parse)?.unwrap_or(default))
    }
}

fn parse_usize(s: &str) -> Result<usize, String> {
    s.trim().parse().map_err(|_| format!("`{s}` is not a count"))
}

fn parse_u64(s: &str) -> Result<u64, String> {
    s.trim().parse().map_err(|_| format!("`{s}` is not an integer seed"))
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.trim().parse().map_err(|_| format!("`{s}` is not a number"))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("`{other}` is not a boolean")),
    }
}

fn parse_path(s: &str) -> Result<PathBuf, String> {
    Ok(PathBuf::from(s))
}

fn parse_scenario(s: &str) -> Result<&'static str, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "discrete" => Ok("discrete"),
        "continuous" => Ok("continuous"),
        "m4_synthetic" | "m4-synthetic" | "m4" => Ok("m4_synthetic"),
        other => Err(format!(
            "unknown scenario `{other}` (expected discrete, continuous, or m4_synthetic)"
        )),
    }
}

fn parse_kinds(s: &str) -> Result<Vec<EstimandKind>, String> {
    let mut kinds = Vec::new();
    for part in s.split(',') {
        if part.trim().is_empty() {
            continue;
        }
        kinds.push(EstimandKind::parse(part)?);
    }
    if kinds.is_empty() {
        return Err("no estimand kinds given".into());
    }
    Ok(kinds)
}

fn parse_methods(s: &str) -> Result<Vec<Method>, String> {
    let mut methods = Vec::new();
    for part in s.split(',') {
        if part.trim().is_empty() {
            continue;
        }
        methods.push(Method::parse(part)?);
    }
    if methods.is_empty() {
        return Err("no methods given".into());
    }
    Ok(methods)
}

fn parse_variants(s: &str) -> Result<Vec<Variant>, String> {
    let mut out = Vec::new();
    for part in s.split(',') {
        match part.trim().to_ascii_lowercase().as_str() {
            "" => {}
            "feasible" => out.push(Variant::Feasible),
            "oracle" => out.push(Variant::Oracle),
            other => return Err(format!("unknown variant `{other}` (expected feasible or oracle)")),
        }
    }
    if out.is_empty() {
        return Err("no variants given".into());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
enum CliLearner {
    CellMean,
    Irls(usize),
    Known(f64),
    Oracle,
}

impl CliLearner {
    fn display(&self) -> String {
        match self {
            CliLearner::CellMean => "cell_mean".into(),
            CliLearner::Irls(d) => format!("irls:{d}"),
            CliLearner::Known(v) => format!("known:{v}"),
            CliLearner::Oracle => "oracle".into(),
        }
    }
}

fn parse_learner(s: &str) -> Result<CliLearner, String> {
    let t = s.trim().to_ascii_lowercase();
    if t == "cell_mean" || t == "cell-mean" {
        return Ok(CliLearner::CellMean);
    }
    if t == "oracle" {
        return Ok(CliLearner::Oracle);
    }
    if let Some(rest) = t.strip_prefix("irls:") {
        let degree: usize = rest
            .parse()
            .map_err(|_| format!("`{rest}` is not a polynomial degree"))?;
        return Ok(CliLearner::Irls(degree));
    }
    if let Some(rest) = t.strip_prefix("known:") {
        let v: f64 = rest.parse().map_err(|_| format!("`{rest}` is not a number"))?;
        return Ok(CliLearner::Known(v));
    }
    Err(format!(
        "unknown learner `{s}` (expected cell_mean, irls:<degree>, known:<value>, or oracle)"
    ))
}

fn parse_gamma(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("`{p}` is not a number")))
        .collect()
}

fn parse_outcome(s: &str) -> Result<OutcomeKind, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "binary" => Ok(OutcomeKind::Binary),
        "continuous" => Ok(OutcomeKind::Continuous),
        other => Err(format!("unknown outcome kind `{other}` (expected binary or continuous)")),
    }
}

// ---------------------------------------------------------------------------
// Resolved configs
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct ResolvedSimulate {
    spec: ScenarioSpec,
    out: PathBuf,
}

#[derive(Debug)]
struct ResolvedEstimate {
    input: PathBuf,
    outcome: OutcomeKind,
    kinds: Vec<EstimandKind>,
    methods: Vec<Method>,
    restriction: String,
    psi: Option<PsiSpec>,
    learners: [CliLearner; 7], // p, e, q, m10, m01, m00, m11
    k: usize,
    seed: u64,
    cv_probes: Option<String>,
    cv_gamma: Option<Vec<f64>>,
    cv_bootstrap: Option<usize>,
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct ResolvedBenchmark {
    spec: ScenarioSpec,
    config: BenchmarkConfig,
    out_dir: PathBuf,
}

const SIMULATE_KEYS: &[&str] = &[
    "scenario",
    "m4-homoskedastic",
    "n-rct",
    "m-obs",
    "case-keep",
    "control-keep",
    "seed",
    "out",
];

const ESTIMATE_KEYS: &[&str] = &[
    "input",
    "outcome",
    "kinds",
    "methods",
    "restriction",
    "psi",
    "p-learner",
    "e-learner",
    "q-learner",
    "m-learner",
    "m10-learner",
    "m01-learner",
    "m00-learner",
    "m11-learner",
    "k",
    "seed",
    "cv-probes",
    "cv-gamma",
    "cv-bootstrap",
    "out",
];

const BENCHMARK_KEYS: &[&str] = &[
    "scenario",
    "m4-homoskedastic",
    "n-rct",
    "m-obs",
    "case-keep",
    "control-keep",
    "methods",
    "kinds",
    "variants",
    "replicates",
    "bootstrap",
    "k",
    "seed",
    "jobs",
    "out-dir",
];

fn scenario_kind(name: &str, m4_homoskedastic: bool) -> ScenarioKind {
    match name {
        "continuous" => ScenarioKind::Continuous,
        "m4_synthetic" => ScenarioKind::M4Synthetic { homoskedastic: m4_homoskedastic },
        _ => ScenarioKind::Discrete,
    }
}

fn resolve_scenario(
    r: &Resolver,
    scenario: Option<String>,
    m4_homoskedastic: Option<bool>,
    n_rct: Option<usize>,
    m_obs: Option<usize>,
    case_keep: Option<f64>,
    control_keep: Option<f64>,
    seed: Option<u64>,
) -> Result<ScenarioSpec, CliError> {
    let scenario_name = r.get(
        scenario.as_deref().map(|s| parse_scenario(s)).transpose().map_err(invalid)?,
        "scenario",
        parse_scenario,
        "discrete",
    )?;
    let homoskedastic = r.get(m4_homoskedastic, "m4-homoskedastic", parse_bool, false)?;
    let spec = ScenarioSpec {
        kind: scenario_kind(scenario_name, homoskedastic),
        n_rct: r.get(n_rct, "n-rct", parse_usize, 3000)?,
        m_obs: r.get(m_obs, "m-obs", parse_usize, 3000)?,
        case_keep: r.get(case_keep, "case-keep", parse_f64, 0.9)?,
        control_keep: r.get(control_keep, "control-keep", parse_f64, 0.1)?,
        seed: r.get(seed, "seed", parse_u64, 0)?,
    };
    spec.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(spec)
}

fn resolve_simulate(args: SimulateArgs, file: HashMap<String, String>) -> Result<ResolvedSimulate, CliError> {
    let r = Resolver::new(file, SIMULATE_KEYS)?;
    let spec = resolve_scenario(
        &r,
        args.scenario,
        args.m4_homoskedastic,
        args.n_rct,
        args.m_obs,
        args.case_keep,
        args.control_keep,
        args.seed,
    )?;
    let out = r.get(args.out, "out", parse_path, PathBuf::from("dataset.csv"))?;
    Ok(ResolvedSimulate { spec, out })
}

fn resolve_estimate(args: EstimateArgs, file: HashMap<String, String>) -> Result<ResolvedEstimate, CliError> {
    let r = Resolver::new(file, ESTIMATE_KEYS)?;
    let input = r
        .parsed(args.input, "input", parse_path)?
        .ok_or_else(|| invalid("missing required `--input <CSV>`"))?;
    let outcome = r.get(
        args.outcome.as_deref().map(parse_outcome).transpose().map_err(invalid)?,
        "outcome",
        parse_outcome,
        OutcomeKind::Binary,
    )?;
    let restriction = r.get(
        args.restriction.map(|s| Ok::<_, String>(s)).transpose().map_err(invalid)?,
        "restriction",
        |s| Ok(s.to_string()),
        "none".to_string(),
    )?;
    let restriction = restriction.trim().to_ascii_lowercase();
    if !["none", "m4", "m5"].contains(&restriction.as_str()) {
        return Err(invalid(format!(
            "unknown restriction `{restriction}` (expected none, m4, or m5); pass --restriction none|m4|m5"
        )));
    }
    if restriction == "m5" && outcome == OutcomeKind::Continuous {
        return Err(invalid(
            "restriction m5 requires binary outcomes; use --outcome binary or pick --restriction none/m4",
        ));
    }

    let kinds = r.get(
        args.kinds.as_deref().map(parse_kinds).transpose().map_err(invalid)?,
        "kinds",
        parse_kinds,
        EstimandKind::ALL.to_vec(),
    )?;
    let default_methods = match restriction.as_str() {
        "m4" => vec![Method::Baseline, Method::EffM4],
        "m5" => vec![Method::Baseline, Method::EffM5],
        _ => vec![Method::Baseline],
    };
    let methods = r.get(
        args.methods.as_deref().map(parse_methods).transpose().map_err(invalid)?,
        "methods",
        parse_methods,
        default_methods,
    )?;
    for m in &methods {
        match m {
            Method::EffM4 if restriction != "m4" => {
                return Err(invalid("method eff_m4 needs --restriction m4"));
            }
            Method::EffM5 if restriction != "m5" => {
                return Err(invalid("method eff_m5 needs --restriction m5"));
            }
            _ => {}
        }
    }

    let psi = r
        .parsed(args.psi, "psi", |s| Ok(s.to_string()))?
        .map(|s| PsiSpec::parse(&s).map_err(invalid))
        .transpose()?;

    let learner = |cli: Option<String>, key: &'static str| -> Result<Option<CliLearner>, CliError> {
        r.parsed(cli.as_deref().map(parse_learner).transpose().map_err(invalid)?, key, parse_learner)
    };
    let m_default = learner(args.m_learner, "m-learner")?.unwrap_or(CliLearner::CellMean);
    let learners = [
        learner(args.p_learner, "p-learner")?.unwrap_or(CliLearner::CellMean),
        learner(args.e_learner, "e-learner")?.unwrap_or(CliLearner::CellMean),
        learner(args.q_learner, "q-learner")?.unwrap_or(CliLearner::CellMean),
        learner(args.m10_learner, "m10-learner")?.unwrap_or_else(|| m_default.clone()),
        learner(args.m01_learner, "m01-learner")?.unwrap_or_else(|| m_default.clone()),
        learner(args.m00_learner, "m00-learner")?.unwrap_or_else(|| m_default.clone()),
        learner(args.m11_learner, "m11-learner")?.unwrap_or_else(|| m_default.clone()),
    ];
    if learners.iter().any(|l| *l == CliLearner::Oracle) {
        return Err(invalid(
            "oracle learners need a known data-generating process; use the benchmark subcommand instead",
        ));
    }
    if restriction == "m4" && !matches!(learners[1], CliLearner::Known(_)) {
        return Err(invalid(
            "restriction m4 needs a known constant propensity; pass --e-learner known:<value>",
        ));
    }

    let cv_probes = r.parsed(args.cv_probes, "cv-probes", |s| {
        let t = s.trim().to_ascii_lowercase();
        if t == "discrete" || t == "continuous" {
            Ok(t)
        } else {
            Err(format!("unknown cv probes `{s}` (expected discrete or continuous)"))
        }
    })?;
    let cv_gamma = r.parsed(
        args.cv_gamma.as_deref().map(parse_gamma).transpose().map_err(invalid)?,
        "cv-gamma",
        parse_gamma,
    )?;
    let cv_bootstrap = r.parsed(args.cv_bootstrap, "cv-bootstrap", parse_usize)?;
    if methods.contains(&Method::ControlVariate) && cv_gamma.is_none() && cv_bootstrap.is_none() {
        return Err(invalid(
            "method cv needs an adjustment factor; pass --cv-gamma <values> or --cv-bootstrap <B>",
        ));
    }

    Ok(ResolvedEstimate {
        input,
        outcome,
        kinds,
        methods,
        restriction,
        psi,
        learners,
        k: r.get(args.k, "k", parse_usize, 5)?,
        seed: r.get(args.seed, "seed", parse_u64, 0)?,
        cv_probes,
        cv_gamma,
        cv_bootstrap,
        out: r.parsed(args.out, "out", parse_path)?,
    })
}

fn resolve_benchmark(args: BenchmarkArgs, file: HashMap<String, String>) -> Result<ResolvedBenchmark, CliError> {
    let r = Resolver::new(file, BENCHMARK_KEYS)?;
    let spec = resolve_scenario(
        &r,
        args.scenario,
        args.m4_homoskedastic,
        args.n_rct,
        args.m_obs,
        args.case_keep,
        args.control_keep,
        args.seed,
    )?;
    let default_methods = match spec.kind {
        ScenarioKind::M4Synthetic { .. } => vec![Method::Baseline, Method::EffM4],
        _ => vec![Method::Baseline, Method::EffM5, Method::ControlVariate],
    };
    let jobs = match r.parsed(args.jobs, "jobs", parse_usize)? {
        Some(j) => j,
        None => match std::env::var("FUSIONEST_JOBS") {
            Ok(v) => parse_usize(&v)
                .map_err(|e| invalid(format!("FUSIONEST_JOBS: {e}")))?,
            Err(_) => 0,
        },
    };
    let config = BenchmarkConfig {
        methods: r.get(
            args.methods.as_deref().map(parse_methods).transpose().map_err(invalid)?,
            "methods",
            parse_methods,
            default_methods,
        )?,
        variants: r.get(
            args.variants.as_deref().map(parse_variants).transpose().map_err(invalid)?,
            "variants",
            parse_variants,
            vec![Variant::Feasible, Variant::Oracle],
        )?,
        kinds: r.get(
            args.kinds.as_deref().map(parse_kinds).transpose().map_err(invalid)?,
            "kinds",
            parse_kinds,
            EstimandKind::ALL.to_vec(),
        )?,
        replicates: r.get(args.replicates, "replicates", parse_usize, 1000)?,
        bootstrap: r.get(args.bootstrap, "bootstrap", parse_usize, 1000)?,
        k_folds: r.get(args.k, "k", parse_usize, 5)?,
        jobs,
        progress: true,
    };
    let out_dir = r.get(args.out_dir, "out-dir", parse_path, PathBuf::from("bench_out"))?;
    Ok(ResolvedBenchmark { spec, config, out_dir })
}

// ---------------------------------------------------------------------------
// Effective-config echo
// ---------------------------------------------------------------------------

fn scenario_lines(spec: &ScenarioSpec) -> Vec<(String, String)> {
    let mut lines = vec![
        ("scenario".into(), match spec.kind {
            ScenarioKind::Discrete => "discrete".into(),
            ScenarioKind::Continuous => "continuous".into(),
            ScenarioKind::M4Synthetic { .. } => "m4_synthetic".to_string(),
        }),
    ];
    if let ScenarioKind::M4Synthetic { homoskedastic } = spec.kind {
        lines.push(("m4-homoskedastic".into(), homoskedastic.to_string()));
    }
    lines.extend([
        ("n-rct".into(), spec.n_rct.to_string()),
        ("m-obs".into(), spec.m_obs.to_string()),
        ("case-keep".into(), spec.case_keep.to_string()),
        ("control-keep".into(), spec.control_keep.to_string()),
        ("seed".into(), spec.seed.to_string()),
    ]);
    lines
}

fn print_config_lines(command: &str, lines: &[(String, String)]) {
    println!("command = {command}");
    for (k, v) in lines {
        println!("{k} = {v}");
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Parse arguments and run. Returns the process exit code: 0 success,
/// 1 validation error, 2 runtime failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e @ CliError::Validation(_)) => {
            eprintln!("{e}");
            1
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("{e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => load_config_file(path)?,
        None => HashMap::new(),
    };
    match cli.command {
        Command::Simulate(args) => {
            let resolved = resolve_simulate(args, file)?;
            if cli.print_config {
                let mut lines = scenario_lines(&resolved.spec);
                lines.push(("out".into(), resolved.out.display().to_string()));
                print_config_lines("simulate", &lines);
                return Ok(());
            }
            run_simulate(resolved)
        }
        Command::Estimate(args) => {
            let resolved = resolve_estimate(args, file)?;
            if cli.print_config {
                print_config_lines("estimate", &estimate_lines(&resolved));
                return Ok(());
            }
            run_estimate(resolved)
        }
        Command::Benchmark(args) => {
            let resolved = resolve_benchmark(args, file)?;
            if cli.print_config {
                let mut lines = scenario_lines(&resolved.spec);
                lines.extend([
                    ("methods".into(), join(&resolved.config.methods)),
                    ("kinds".into(), join(&resolved.config.kinds)),
                    ("variants".into(), join(&resolved.config.variants)),
                    ("replicates".into(), resolved.config.replicates.to_string()),
                    ("bootstrap".into(), resolved.config.bootstrap.to_string()),
                    ("k".into(), resolved.config.k_folds.to_string()),
                    ("jobs".into(), resolved.config.jobs.to_string()),
                    ("out-dir".into(), resolved.out_dir.display().to_string()),
                ]);
                print_config_lines("benchmark", &lines);
                return Ok(());
            }
            run_benchmark_cmd(resolved)
        }
    }
}

fn estimate_lines(resolved: &ResolvedEstimate) -> Vec<(String, String)> {
    let mut lines = vec![
        ("input".into(), resolved.input.display().to_string()),
        (
            "outcome".into(),
            match resolved.outcome {
                OutcomeKind::Binary => "binary".to_string(),
                OutcomeKind::Continuous => "continuous".to_string(),
            },
        ),
        ("kinds".into(), join(&resolved.kinds)),
        ("methods".into(), join(&resolved.methods)),
        ("restriction".into(), resolved.restriction.clone()),
    ];
    if let Some(psi) = &resolved.psi {
        lines.push(("psi".into(), psi.to_string()));
    }
    for (i, key) in ["p-learner", "e-learner", "q-learner", "m10-learner", "m01-learner", "m00-learner", "m11-learner"]
        .iter()
        .enumerate()
    {
        lines.push((key.to_string(), resolved.learners[i].display()));
    }
    lines.push(("k".into(), resolved.k.to_string()));
    lines.push(("seed".into(), resolved.seed.to_string()));
    if let Some(p) = &resolved.cv_probes {
        lines.push(("cv-probes".into(), p.clone()));
    }
    if let Some(g) = &resolved.cv_gamma {
        lines.push(("cv-gamma".into(), join(g)));
    }
    if let Some(b) = resolved.cv_bootstrap {
        lines.push(("cv-bootstrap".into(), b.to_string()));
    }
    if let Some(out) = &resolved.out {
        lines.push(("out".into(), out.display().to_string()));
    }
    lines
}

fn run_simulate(resolved: ResolvedSimulate) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(resolved.spec.seed, STREAM_REPLICATE, 0));
    let data = generate(&resolved.spec, &mut rng)?;
    data.write_csv(&resolved.out)?;
    println!(
        "wrote {} rows ({} experimental, {} observational, d={}) to {}",
        data.n(),
        data.n_rct(),
        data.n_obs(),
        data.d(),
        resolved.out.display()
    );
    Ok(())
}

fn cli_learner_to_spec(l: &CliLearner) -> LearnerSpec {
    match l {
        CliLearner::CellMean => LearnerSpec::CellMean,
        CliLearner::Irls(degree) => LearnerSpec::Irls { degree: *degree },
        CliLearner::Known(v) => LearnerSpec::KnownConst(*v),
        CliLearner::Oracle => unreachable!("rejected during resolution"),
    }
}

fn run_estimate(resolved: ResolvedEstimate) -> Result<(), CliError> {
    let data = Dataset::load_csv(&resolved.input, resolved.outcome)?;
    let psi = resolved
        .psi
        .clone()
        .unwrap_or_else(|| PsiSpec::intercept_and_vars(data.d()));

    let restriction = match resolved.restriction.as_str() {
        "m4" => RestrictionSpec::M4 { psi: psi.clone() },
        "m5" => RestrictionSpec::M5,
        _ => RestrictionSpec::None,
    };
    let variance = match (&restriction, resolved.outcome) {
        (_, OutcomeKind::Binary) => VarianceSpec::FromBinaryMean,
        (RestrictionSpec::M4 { psi }, OutcomeKind::Continuous) => {
            VarianceSpec::LogGlm { psi: psi.clone() }
        }
        _ => VarianceSpec::None,
    };
    let spec = LearnedSpec {
        p: cli_learner_to_spec(&resolved.learners[0]),
        e: cli_learner_to_spec(&resolved.learners[1]),
        q: cli_learner_to_spec(&resolved.learners[2]),
        m10: cli_learner_to_spec(&resolved.learners[3]),
        m01: cli_learner_to_spec(&resolved.learners[4]),
        m00: cli_learner_to_spec(&resolved.learners[5]),
        m11: cli_learner_to_spec(&resolved.learners[6]),
        restriction,
        variance,
        irls: IrlsOptions::default(),
        truncate: true,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(resolved.seed, STREAM_REPLICATE, 0));
    let folds = make_folds(data.n(), resolved.k, &mut rng)?;
    let bundle = cross_fit(&data, &folds, &spec)?;

    let probes = match resolved.cv_probes.as_deref() {
        Some("discrete") => CvProbes::DiscreteCells,
        Some("continuous") => CvProbes::ContinuousSample { count: 50 },
        _ => {
            let all_binary = data
                .rows()
                .iter()
                .all(|r| r.x.iter().all(|&v| v == 0.0 || v == 1.0));
            if all_binary && data.d() <= 16 {
                CvProbes::DiscreteCells
            } else {
                CvProbes::ContinuousSample { count: 50 }
            }
        }
    };

    // Control-variate adjustment factor: supplied directly, or estimated
    // from bootstrap replicates of this dataset.
    let needs_cv = resolved.methods.contains(&Method::ControlVariate);
    let mut gamma_by_kind: Vec<(EstimandKind, Vec<f64>)> = Vec::new();
    if needs_cv {
        if let Some(g) = &resolved.cv_gamma {
            for &kind in &resolved.kinds {
                gamma_by_kind.push((kind, g.clone()));
            }
        } else {
            let b = resolved.cv_bootstrap.unwrap_or(1000);
            let mut pairs: Vec<(EstimandKind, Vec<(f64, Vec<f64>)>)> =
                resolved.kinds.iter().map(|&k| (k, Vec::new())).collect();
            for rep in 0..b {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(resolved.seed, 0x6376, rep as u64));
                let rows: Vec<_> = (0..data.n())
                    .map(|_| data.rows()[rng.random_range(0..data.n())].clone())
                    .collect();
                let boot = match Dataset::new(rows, resolved.outcome) {
                    Ok(d) => d,
                    Err(_) => continue,
                };
                let folds = match make_folds(boot.n(), resolved.k, &mut rng) {
                    Ok(f) => f,
                    Err(_) => continue,
                };
                let Ok(bundle) = cross_fit(&boot, &folds, &spec) else { continue };
                let Ok(full) = fit_full(&boot, &spec.for_cv_refit()) else { continue };
                let Ok(stat) = cv_statistic(&boot, &full, &probes, &mut rng) else { continue };
                for (kind, acc) in pairs.iter_mut() {
                    if let Ok(rep) = fit_baseline(&boot, &bundle, *kind) {
                        acc.push((rep.tau_hat, stat.lambda.clone()));
                    }
                }
            }
            for (kind, acc) in pairs {
                let gamma = estimate_gamma(&acc)?;
                gamma_by_kind.push((kind, gamma));
            }
        }
    }

    let full_fit = if needs_cv {
        Some(fit_full(&data, &spec.for_cv_refit())?)
    } else {
        None
    };
    let mut reports: Vec<EstimateReport> = Vec::new();
    for &kind in &resolved.kinds {
        for &method in &resolved.methods {
            let report = match method {
                Method::Baseline => fit_baseline(&data, &bundle, kind)?,
                Method::EffM4 => one_step_m4(&data, &bundle, kind, &psi)?,
                Method::EffM5 => one_step_m5(&data, &bundle, kind)?,
                Method::ControlVariate => {
                    let baseline = fit_baseline(&data, &bundle, kind)?;
                    let stat =
                        cv_statistic(&data, full_fit.as_ref().unwrap(), &probes, &mut rng)?;
                    let gamma = gamma_by_kind
                        .iter()
                        .find(|(k, _)| *k == kind)
                        .map(|(_, g)| g.as_slice())
                        .expect("gamma resolved above");
                    apply_control_variate(&baseline, &stat, gamma)?
                }
            };
            reports.push(report);
        }
    }

    println!("{:<6} {:<10} {:>14} {:>14}", "kind", "method", "tau_hat", "adjustment");
    for r in &reports {
        println!(
            "{:<6} {:<10} {:>14.8} {:>14.8}",
            r.kind.label(),
            r.method.label(),
            r.tau_hat,
            r.adjustment
        );
    }
    let flagged: Vec<&str> = {
        let d = reports
            .iter()
            .map(|r| r.diagnostics)
            .find(|d| !d.irls_all_converged || d.ridge_fallback || d.degenerate_cells);
        match d {
            Some(d) => {
                let mut f = Vec::new();
                if !d.irls_all_converged {
                    f.push("irls-not-converged");
                }
                if d.ridge_fallback {
                    f.push("ridge-fallback");
                }
                if d.degenerate_cells {
                    f.push("degenerate-cells");
                }
                f
            }
            None => Vec::new(),
        }
    };
    if !flagged.is_empty() {
        eprintln!("diagnostics: {}", flagged.join(", "));
    }

    if let Some(out) = &resolved.out {
        let mut t = Table::new(["kind", "method", "tau_hat", "adjustment", "tau_baseline"]);
        for r in &reports {
            t.push(vec![
                Cell::Text(r.kind.label().into()),
                Cell::Text(r.method.label().into()),
                Cell::Float(r.tau_hat),
                Cell::Float(r.adjustment),
                Cell::Float(r.tau_baseline),
            ]);
        }
        t.write_csv(out)?;
        println!("wrote estimates to {}", out.display());
    }
    Ok(())
}

fn run_benchmark_cmd(resolved: ResolvedBenchmark) -> Result<(), CliError> {
    let result = run_benchmark(&resolved.spec, &resolved.config)?;
    fs::create_dir_all(&resolved.out_dir)?;
    let rep_path = resolved.out_dir.join("replicates.csv");
    let sum_path = resolved.out_dir.join("summary.csv");
    let json_path = resolved.out_dir.join("summary.json");
    result.replicates_table().write_csv(&rep_path)?;
    result.summary_table().write_csv(&sum_path)?;
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_else(|_| "0".into());
    let json = result.summary_json(Some(&now));
    fs::write(&json_path, format!("{}\n", serde_json::to_string_pretty(&json).expect("json")))?;

    println!(
        "scenario {} n_rct={} m_obs={} replicates={} failures={}",
        result.scenario, result.n_rct, result.m_obs, result.replicates, result.n_fail
    );
    println!(
        "{:<10} {:<9} {:<5} {:>12} {:>8} {:>16}",
        "method", "variant", "kind", "mse", "re", "re 95% ci"
    );
    for s in &result.summaries {
        println!(
            "{:<10} {:<9} {:<5} {:>12.6e} {:>8.3} {:>16}",
            s.method.label(),
            s.variant.label(),
            s.kind.label(),
            s.mse,
            s.re,
            format!("({:.3}, {:.3})", s.ci_lo, s.ci_hi)
        );
    }
    println!(
        "wrote {}, {}, {}",
        rep_path.display(),
        sum_path.display(),
        json_path.display()
    );
    Ok(())
}

// The estimate path needs Arc only through LearnedSpec's KnownFn variant,
// which the CLI never constructs; silence the unused-import lint paths.
#[allow(unused)]
fn _known_fn_placeholder() -> LearnerSpec {
    LearnerSpec::KnownFn(Arc::new(|_x: &[f64]| 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_ok(argv: &[&str]) -> Cli {
        Cli::try_parse_from(argv).unwrap()
    }

    #[test]
    fn benchmark_flags_resolve() {
        let cli = parse_ok(&[
            "fusionest",
            "benchmark",
            "--scenario",
            "discrete",
            "--n-rct",
            "3000",
            "--methods",
            "baseline,eff_m5,cv",
            "--kinds",
            "rct,obs,tgt",
            "--replicates",
            "1000",
            "--seed",
            "7",
        ]);
        let Command::Benchmark(args) = cli.command else { panic!() };
        let resolved = resolve_benchmark(args, HashMap::new()).unwrap();
        assert_eq!(resolved.spec.n_rct, 3000);
        assert_eq!(resolved.spec.seed, 7);
        assert_eq!(
            resolved.config.methods,
            vec![Method::Baseline, Method::EffM5, Method::ControlVariate]
        );
        assert_eq!(resolved.config.kinds.len(), 3);
        assert_eq!(resolved.config.replicates, 1000);
        // defaults
        assert_eq!(resolved.config.k_folds, 5);
        assert_eq!(resolved.config.bootstrap, 1000);
        assert_eq!(resolved.spec.case_keep, 0.9);
        assert_eq!(resolved.spec.control_keep, 0.1);
    }

    #[test]
    fn estimate_flags_resolve() {
        let cli = parse_ok(&[
            "fusionest",
            "estimate",
            "--input",
            "data.csv",
            "--outcome",
            "continuous",
            "--restriction",
            "m4",
            "--psi",
            "intercept,x1,x2,x3",
            "--e-learner",
            "known:0.5",
            "--k",
            "5",
        ]);
        let Command::Estimate(args) = cli.command else { panic!() };
        let resolved = resolve_estimate(args, HashMap::new()).unwrap();
        assert_eq!(resolved.restriction, "m4");
        assert_eq!(resolved.psi.as_ref().unwrap().dim(), 4);
        assert_eq!(resolved.k, 5);
        assert_eq!(resolved.methods, vec![Method::Baseline, Method::EffM4]);
    }

    #[test]
    fn conflicting_options_rejected() {
        // m5 with continuous outcomes
        let cli = parse_ok(&[
            "fusionest",
            "estimate",
            "--input",
            "data.csv",
            "--outcome",
            "continuous",
            "--restriction",
            "m5",
        ]);
        let Command::Estimate(args) = cli.command else { panic!() };
        let err = resolve_estimate(args, HashMap::new()).unwrap_err();
        assert!(matches!(err, CliError::Validation(_)), "{err}");

        // m4 without a known constant propensity
        let cli = parse_ok(&[
            "fusionest",
            "estimate",
            "--input",
            "d.csv",
            "--outcome",
            "continuous",
            "--restriction",
            "m4",
        ]);
        let Command::Estimate(args) = cli.command else { panic!() };
        assert!(resolve_estimate(args, HashMap::new()).is_err());

        // cv without gamma or bootstrap
        let cli = parse_ok(&[
            "fusionest",
            "estimate",
            "--input",
            "d.csv",
            "--methods",
            "baseline,cv",
        ]);
        let Command::Estimate(args) = cli.command else { panic!() };
        assert!(resolve_estimate(args, HashMap::new()).is_err());

        // oracle learners outside benchmark
        let cli = parse_ok(&[
            "fusionest",
            "estimate",
            "--input",
            "d.csv",
            "--p-learner",
            "oracle",
        ]);
        let Command::Estimate(args) = cli.command else { panic!() };
        assert!(resolve_estimate(args, HashMap::new()).is_err());
    }

    #[test]
    fn config_file_merge_and_unknown_keys() {
        let mut file = HashMap::new();
        file.insert("n-rct".to_string(), "600".to_string());
        file.insert("seed".to_string(), "9".to_string());
        let cli = parse_ok(&["fusionest", "benchmark", "--seed", "11"]);
        let Command::Benchmark(args) = cli.command else { panic!() };
        let resolved = resolve_benchmark(args, file).unwrap();
        // flag wins over file; file wins over default
        assert_eq!(resolved.spec.seed, 11);
        assert_eq!(resolved.spec.n_rct, 600);

        let mut bad = HashMap::new();
        bad.insert("not-a-key".to_string(), "1".to_string());
        let cli = parse_ok(&["fusionest", "benchmark"]);
        let Command::Benchmark(args) = cli.command else { panic!() };
        assert!(resolve_benchmark(args, bad).is_err());
    }

    #[test]
    fn unknown_method_and_scenario_messages() {
        assert!(parse_methods("baseline,nope").is_err());
        assert!(parse_scenario("star").is_err());
        assert!(parse_kinds("rct,what").is_err());
        assert!(parse_learner("mars").is_err());
        assert_eq!(parse_learner("irls:2").unwrap(), CliLearner::Irls(2));
        assert_eq!(parse_learner("known:0.25").unwrap(), CliLearner::Known(0.25));
    }
}
