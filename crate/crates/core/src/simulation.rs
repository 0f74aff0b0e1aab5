//! Synthetic data-generating processes, analytic oracle nuisances, exact
//! enumeration of the discrete scenario, and the Monte Carlo benchmark
//! harness with bootstrap confidence intervals.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{make_folds, Cell, Dataset, FusedObservation, OutcomeKind, Table};
use crate::estimators::{
    apply_control_variate, cv_statistic, estimate_gamma, fit_baseline, one_step_m4, one_step_m5,
    CvProbes, EstimateReport, Method,
};
use crate::influence::EstimandKind;
use crate::nuisance::{
    cross_fit, expit, fit_full, CrossFitBundle, IrlsOptions, LearnedSpec, LearnerSpec,
    NuisanceAt, NuisanceModel, OracleFn, PsiSpec, RestrictionKind, RestrictionSpec, VarianceSpec,
};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("selection retained too few rows: needed {needed}, kept {kept} after {drawn} draws")]
    SelectionStarved { needed: usize, kept: usize, drawn: usize },
    #[error("{0} is not supported for this scenario")]
    UnsupportedScenario(&'static str),
    #[error("invalid scenario or benchmark configuration: {0}")]
    InvalidSpec(String),
    #[error("selection requires binary outcomes, got {0}")]
    NonBinaryOutcome(f64),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Nuisance(#[from] crate::nuisance::NuisanceError),
    #[error(transparent)]
    Estimator(#[from] crate::estimators::EstimatorError),
}

// ---------------------------------------------------------------------------
// Seed derivation
// ---------------------------------------------------------------------------

/// SplitMix64 finalizer; the basis of all derived seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for work item `index` of a named stream:
/// `splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

pub const STREAM_REPLICATE: u64 = 0x5245_504C;
pub const STREAM_CALIBRATE: u64 = 0x4341_4C42;
pub const STREAM_BOOTSTRAP: u64 = 0x424F_4F54;

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Discrete,
    Continuous,
    M4Synthetic { homoskedastic: bool },
}

impl ScenarioKind {
    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::Discrete => "discrete",
            ScenarioKind::Continuous => "continuous",
            ScenarioKind::M4Synthetic { homoskedastic: false } => "m4_synthetic",
            ScenarioKind::M4Synthetic { homoskedastic: true } => "m4_synthetic_homoskedastic",
        }
    }

    pub fn outcome_kind(self) -> OutcomeKind {
        match self {
            ScenarioKind::M4Synthetic { .. } => OutcomeKind::Continuous,
            _ => OutcomeKind::Binary,
        }
    }
}

/// Simulation scenario: sizes, outcome-mediated selection strengths, seed.
#[derive(Debug, Clone, Copy)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub n_rct: usize,
    pub m_obs: usize,
    pub case_keep: f64,
    pub control_keep: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, n_rct: usize, seed: u64) -> Self {
        ScenarioSpec {
            kind,
            n_rct,
            m_obs: 3000,
            case_keep: 0.9,
            control_keep: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        if self.n_rct == 0 || self.m_obs == 0 {
            return Err(SimulationError::InvalidSpec("sample sizes must be positive".into()));
        }
        for (name, v) in [("case-keep", self.case_keep), ("control-keep", self.control_keep)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(SimulationError::InvalidSpec(format!(
                    "{name} must lie in (0,1), got {v}"
                )));
            }
        }
        Ok(())
    }

    /// The fixed sample-share used for oracle computations.
    pub fn rho(&self) -> f64 {
        self.n_rct as f64 / (self.n_rct + self.m_obs) as f64
    }
}

/// Keep a generated row with probability `case_keep` if `y = 1`, else
/// `control_keep`. This is the outcome-mediated selection mechanism that the
/// observational sample is subjected to.
pub fn apply_selection(
    pool: &[FusedObservation],
    spec: &ScenarioSpec,
    rng: &mut impl Rng,
) -> Result<Vec<FusedObservation>, SimulationError> {
    let mut kept = Vec::new();
    for row in pool {
        if row.y != 0.0 && row.y != 1.0 {
            return Err(SimulationError::NonBinaryOutcome(row.y));
        }
        if keep_row(row.y, spec, rng) {
            kept.push(row.clone());
        }
    }
    Ok(kept)
}

fn keep_row(y: f64, spec: &ScenarioSpec, rng: &mut impl Rng) -> bool {
    let p = if y == 1.0 { spec.case_keep } else { spec.control_keep };
    rng.random_bool(p)
}

/// Treatment probability shared by the two binary-outcome scenarios. The
/// generating process is Bernoulli in the linear index `x1 - x2` pushed
/// through the logistic link, which also serves as the known propensity.
pub fn binary_scenario_propensity(x: &[f64]) -> f64 {
    expit(x[0] - x[1])
}

fn discrete_outcome_prob(x: &[f64], z: f64) -> f64 {
    expit(-0.5 + z + (1.0 - 2.0 * z) * (x[0] - x[1]))
}

/// Logit of the continuous-scenario outcome probability; exposed so the
/// interaction structure can be probed directly.
pub fn continuous_outcome_logit(x: &[f64], z: f64) -> f64 {
    -0.5 + z + (1.0 - 2.0 * z) * (x[0] - x[1]) + (1.5 * z - 1.0) * x[0] * x[1]
}

fn continuous_outcome_prob(x: &[f64], z: f64) -> f64 {
    expit(continuous_outcome_logit(x, z))
}

const SELECTION_CAP_FACTOR: usize = 100;

fn gen_selected_then_rct(
    spec: &ScenarioSpec,
    rng: &mut ChaCha8Rng,
    draw_x: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<f64>,
    outcome_prob: &dyn Fn(&[f64], f64) -> f64,
) -> Result<Dataset, SimulationError> {
    let mut rows = Vec::with_capacity(spec.m_obs + spec.n_rct);
    let cap = SELECTION_CAP_FACTOR * spec.m_obs;
    let mut drawn = 0usize;
    while rows.len() < spec.m_obs {
        if drawn >= cap {
            return Err(SimulationError::SelectionStarved {
                needed: spec.m_obs,
                kept: rows.len(),
                drawn,
            });
        }
        drawn += 1;
        let x = draw_x(rng);
        let z = rng.random_bool(binary_scenario_propensity(&x)) as u8;
        let y = rng.random_bool(outcome_prob(&x, z as f64)) as u8 as f64;
        if keep_row(y, spec, rng) {
            rows.push(FusedObservation { s: 0, z, y, x });
        }
    }
    for _ in 0..spec.n_rct {
        let x = draw_x(rng);
        let z = rng.random_bool(binary_scenario_propensity(&x)) as u8;
        let y = rng.random_bool(outcome_prob(&x, z as f64)) as u8 as f64;
        rows.push(FusedObservation { s: 1, z, y, x });
    }
    Ok(Dataset::new(rows, OutcomeKind::Binary)?)
}

/// Discrete scenario: two Bernoulli(1/2) covariates, logistic treatment and
/// outcome models, observational rows drawn through selection until `m_obs`
/// are retained, then `n_rct` unselected rows.
pub fn gen_discrete(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<Dataset, SimulationError> {
    spec.validate()?;
    if spec.kind != ScenarioKind::Discrete {
        return Err(SimulationError::InvalidSpec("spec kind must be discrete".into()));
    }
    let mut draw_x = |rng: &mut ChaCha8Rng| {
        vec![rng.random_bool(0.5) as u8 as f64, rng.random_bool(0.5) as u8 as f64]
    };
    gen_selected_then_rct(spec, rng, &mut draw_x, &discrete_outcome_prob)
}

/// Continuous scenario: two Uniform(-1,1) covariates and an interaction term
/// in the outcome logit.
pub fn gen_continuous(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<Dataset, SimulationError> {
    spec.validate()?;
    if spec.kind != ScenarioKind::Continuous {
        return Err(SimulationError::InvalidSpec("spec kind must be continuous".into()));
    }
    let mut draw_x = |rng: &mut ChaCha8Rng| {
        vec![
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]
    };
    gen_selected_then_rct(spec, rng, &mut draw_x, &continuous_outcome_prob)
}

// ---------------------------------------------------------------------------
// Synthetic linear-confounding scenario
// ---------------------------------------------------------------------------

/// Fully documented Gaussian-outcome process whose observational arms obey
/// the linear confounding restriction with coefficient [`M4Params::theta`]
/// on basis `intercept, x1, x2`. Covariates are Uniform(-1,1)^2 for both
/// samples, so the selection probability is the constant sample share.
#[derive(Debug, Clone, Copy)]
pub struct M4Params {
    pub homoskedastic: bool,
}

impl M4Params {
    pub fn e(&self) -> f64 {
        0.5
    }

    pub fn q(&self, x: &[f64]) -> f64 {
        expit(-0.5 + x[0])
    }

    pub fn cate(&self, x: &[f64]) -> f64 {
        1.0 + 0.2 * x[0]
    }

    pub fn m10(&self, x: &[f64]) -> f64 {
        1.0 + x[0] - 0.5 * x[1]
    }

    pub fn m11(&self, x: &[f64]) -> f64 {
        self.m10(x) + self.cate(x)
    }

    pub fn m00(&self, x: &[f64]) -> f64 {
        0.5 + 0.8 * x[0] + 0.3 * x[1]
    }

    pub fn m01(&self, x: &[f64]) -> f64 {
        let psi_theta: f64 = self
            .psi()
            .eval(x)
            .iter()
            .zip(self.theta())
            .map(|(a, b)| a * b)
            .sum();
        self.m00(x) + self.cate(x) - psi_theta
    }

    pub fn m(&self, s: u8, z: u8, x: &[f64]) -> f64 {
        match (s, z) {
            (1, 1) => self.m11(x),
            (1, 0) => self.m10(x),
            (0, 1) => self.m01(x),
            _ => self.m00(x),
        }
    }

    pub fn v(&self, s: u8, z: u8, x: &[f64]) -> f64 {
        if self.homoskedastic {
            match (s, z) {
                (1, 1) => 0.5,
                _ => 0.3,
            }
        } else {
            match (s, z) {
                (1, 1) => 0.05 + 1.5 * x[0] * x[0],
                (1, 0) => 0.05 + 1.5 * x[1] * x[1],
                _ => 0.05,
            }
        }
    }

    pub fn theta(&self) -> Vec<f64> {
        vec![0.3, -0.2, 0.1]
    }

    pub fn psi(&self) -> PsiSpec {
        PsiSpec::intercept_and_vars(2)
    }

    /// `E[cate(X)]` under Uniform(-1,1)^2: the slope integrates to zero.
    pub fn true_tau(&self) -> f64 {
        1.0
    }
}

/// Synthetic linear-confounding scenario with Gaussian outcomes.
pub fn gen_m4_synthetic(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<Dataset, SimulationError> {
    spec.validate()?;
    let params = match spec.kind {
        ScenarioKind::M4Synthetic { homoskedastic } => M4Params { homoskedastic },
        _ => return Err(SimulationError::InvalidSpec("spec kind must be m4_synthetic".into())),
    };
    let mut rows = Vec::with_capacity(spec.m_obs + spec.n_rct);
    let draw = |s: u8, rng: &mut ChaCha8Rng| {
        let x = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let prop = if s == 1 { params.e() } else { params.q(&x) };
        let z = rng.random_bool(prop) as u8;
        let noise: f64 = StandardNormal.sample(rng);
        let y = params.m(s, z, &x) + params.v(s, z, &x).sqrt() * noise;
        FusedObservation { s, z, y, x }
    };
    for _ in 0..spec.m_obs {
        rows.push(draw(0, rng));
    }
    for _ in 0..spec.n_rct {
        rows.push(draw(1, rng));
    }
    Ok(Dataset::new(rows, OutcomeKind::Continuous)?)
}

/// Draw a dataset for any scenario kind.
pub fn generate(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<Dataset, SimulationError> {
    match spec.kind {
        ScenarioKind::Discrete => gen_discrete(spec, rng),
        ScenarioKind::Continuous => gen_continuous(spec, rng),
        ScenarioKind::M4Synthetic { .. } => gen_m4_synthetic(spec, rng),
    }
}

// ---------------------------------------------------------------------------
// Oracle nuisances
// ---------------------------------------------------------------------------

fn tilted_mean(m1: f64, case_keep: f64, control_keep: f64) -> f64 {
    case_keep * m1 / (case_keep * m1 + control_keep * (1.0 - m1))
}

fn tilt_weight(m1: f64, case_keep: f64, control_keep: f64) -> f64 {
    control_keep + (case_keep - control_keep) * m1
}

/// Tabulated truth for the discrete scenario over the four covariate cells.
#[derive(Debug, Clone)]
struct DiscreteTables {
    rho: f64,
    e: [f64; 4],
    q: [f64; 4],
    p: [f64; 4],
    m1: [[f64; 2]; 4],
    m0: [[f64; 2]; 4],
    /// observational covariate law (selection-tilted)
    px_obs: [f64; 4],
}

fn cell_index(x: &[f64]) -> usize {
    let b = |v: f64| usize::from(v != 0.0);
    b(x[0]) | (b(x[1]) << 1)
}

/// The four covariate cells in index order.
pub fn discrete_cells() -> [[f64; 2]; 4] {
    [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
}

impl DiscreteTables {
    fn build(spec: &ScenarioSpec) -> Self {
        let rho = spec.rho();
        let mut e = [0.0; 4];
        let mut q = [0.0; 4];
        let mut p = [0.0; 4];
        let mut m1 = [[0.0; 2]; 4];
        let mut m0 = [[0.0; 2]; 4];
        let mut px_obs = [0.0; 4];
        let cells = discrete_cells();
        let mut wt = [0.0; 4];
        for (i, x) in cells.iter().enumerate() {
            e[i] = binary_scenario_propensity(x);
            for z in 0..2 {
                m1[i][z] = discrete_outcome_prob(x, z as f64);
                m0[i][z] = tilted_mean(m1[i][z], spec.case_keep, spec.control_keep);
            }
            let w1 = tilt_weight(m1[i][1], spec.case_keep, spec.control_keep);
            let w0 = tilt_weight(m1[i][0], spec.case_keep, spec.control_keep);
            wt[i] = e[i] * w1 + (1.0 - e[i]) * w0;
            q[i] = e[i] * w1 / wt[i];
        }
        let z_norm: f64 = wt.iter().map(|w| 0.25 * w).sum();
        for i in 0..4 {
            px_obs[i] = 0.25 * wt[i] / z_norm;
            p[i] = rho * 0.25 / (rho * 0.25 + (1.0 - rho) * px_obs[i]);
        }
        DiscreteTables { rho, e, q, p, m1, m0, px_obs }
    }

    fn at(&self, x: &[f64]) -> NuisanceAt {
        let i = cell_index(x);
        let (m11, m10, m01, m00) = (self.m1[i][1], self.m1[i][0], self.m0[i][1], self.m0[i][0]);
        NuisanceAt {
            p: self.p[i],
            e: self.e[i],
            q: self.q[i],
            m11,
            m10,
            m01,
            m00,
            v11: m11 * (1.0 - m11),
            v10: m10 * (1.0 - m10),
            v01: m01 * (1.0 - m01),
            v00: m00 * (1.0 - m00),
        }
    }

    fn true_taus(&self) -> [f64; 3] {
        let mut tau_rct = 0.0;
        let mut tau_obs = 0.0;
        for i in 0..4 {
            let cate = self.m1[i][1] - self.m1[i][0];
            tau_rct += 0.25 * cate;
            tau_obs += self.px_obs[i] * cate;
        }
        let tau_tgt = self.rho * tau_rct + (1.0 - self.rho) * tau_obs;
        [tau_rct, tau_obs, tau_tgt]
    }
}

struct DiscreteOracle {
    tables: DiscreteTables,
}

impl OracleFn for DiscreteOracle {
    fn at(&self, x: &[f64]) -> NuisanceAt {
        self.tables.at(x)
    }
}

struct ContinuousOracle {
    rho: f64,
    case_keep: f64,
    control_keep: f64,
    /// E[tilt(X)] under Uniform(-1,1)^2
    z_norm: f64,
}

impl ContinuousOracle {
    fn tilt(&self, x: &[f64]) -> f64 {
        let e = binary_scenario_propensity(x);
        let w1 = tilt_weight(continuous_outcome_prob(x, 1.0), self.case_keep, self.control_keep);
        let w0 = tilt_weight(continuous_outcome_prob(x, 0.0), self.case_keep, self.control_keep);
        e * w1 + (1.0 - e) * w0
    }
}

impl OracleFn for ContinuousOracle {
    fn at(&self, x: &[f64]) -> NuisanceAt {
        let e = binary_scenario_propensity(x);
        let m11 = continuous_outcome_prob(x, 1.0);
        let m10 = continuous_outcome_prob(x, 0.0);
        let m01 = tilted_mean(m11, self.case_keep, self.control_keep);
        let m00 = tilted_mean(m10, self.case_keep, self.control_keep);
        let w1 = tilt_weight(m11, self.case_keep, self.control_keep);
        let w0 = tilt_weight(m10, self.case_keep, self.control_keep);
        let wt = e * w1 + (1.0 - e) * w0;
        let q = e * w1 / wt;
        let p = self.rho / (self.rho + (1.0 - self.rho) * wt / self.z_norm);
        NuisanceAt {
            p,
            e,
            q,
            m11,
            m10,
            m01,
            m00,
            v11: m11 * (1.0 - m11),
            v10: m10 * (1.0 - m10),
            v01: m01 * (1.0 - m01),
            v00: m00 * (1.0 - m00),
        }
    }
}

struct M4Oracle {
    rho: f64,
    params: M4Params,
}

impl OracleFn for M4Oracle {
    fn at(&self, x: &[f64]) -> NuisanceAt {
        let p = self.params;
        NuisanceAt {
            p: self.rho,
            e: p.e(),
            q: p.q(x),
            m11: p.m11(x),
            m10: p.m10(x),
            m01: p.m01(x),
            m00: p.m00(x),
            v11: p.v(1, 1, x),
            v10: p.v(1, 0, x),
            v01: p.v(0, 1, x),
            v00: p.v(0, 0, x),
        }
    }
}

/// The true nuisance functions of a scenario, packaged as a model so every
/// estimator can be run in its oracle variant.
pub fn oracle_nuisances(spec: &ScenarioSpec) -> Result<NuisanceModel, SimulationError> {
    spec.validate()?;
    let rho = spec.rho();
    Ok(match spec.kind {
        ScenarioKind::Discrete => {
            let tables = DiscreteTables::build(spec);
            NuisanceModel::from_oracle(Arc::new(DiscreteOracle { tables }), rho, None)
        }
        ScenarioKind::Continuous => {
            let mut oracle = ContinuousOracle {
                rho,
                case_keep: spec.case_keep,
                control_keep: spec.control_keep,
                z_norm: 1.0,
            };
            oracle.z_norm = quad2(64, |x1, x2| oracle.tilt(&[x1, x2]));
            NuisanceModel::from_oracle(Arc::new(oracle), rho, None)
        }
        ScenarioKind::M4Synthetic { homoskedastic } => {
            let params = M4Params { homoskedastic };
            NuisanceModel::from_oracle(
                Arc::new(M4Oracle { rho, params }),
                rho,
                Some(params.theta()),
            )
        }
    })
}

/// True estimand values: exact enumeration for the discrete scenario,
/// tensor Gauss-Legendre quadrature for the continuous one, closed form for
/// the synthetic linear-confounding process.
pub fn true_tau(spec: &ScenarioSpec, kind: EstimandKind) -> Result<f64, SimulationError> {
    match spec.kind {
        ScenarioKind::Discrete => {
            let taus = DiscreteTables::build(spec).true_taus();
            Ok(match kind {
                EstimandKind::Rct => taus[0],
                EstimandKind::Obs => taus[1],
                EstimandKind::Tgt => taus[2],
            })
        }
        ScenarioKind::Continuous => {
            let (ck, uk) = (spec.case_keep, spec.control_keep);
            let cate = |x1: f64, x2: f64| {
                continuous_outcome_prob(&[x1, x2], 1.0) - continuous_outcome_prob(&[x1, x2], 0.0)
            };
            let tilt = |x1: f64, x2: f64| {
                let e = binary_scenario_propensity(&[x1, x2]);
                e * tilt_weight(continuous_outcome_prob(&[x1, x2], 1.0), ck, uk)
                    + (1.0 - e) * tilt_weight(continuous_outcome_prob(&[x1, x2], 0.0), ck, uk)
            };
            let tau_rct = quad2(64, cate);
            let z_norm = quad2(64, tilt);
            let tau_obs = quad2(64, |a, b| cate(a, b) * tilt(a, b)) / z_norm;
            Ok(match kind {
                EstimandKind::Rct => tau_rct,
                EstimandKind::Obs => tau_obs,
                EstimandKind::Tgt => spec.rho() * tau_rct + (1.0 - spec.rho()) * tau_obs,
            })
        }
        ScenarioKind::M4Synthetic { homoskedastic } => {
            Ok(M4Params { homoskedastic }.true_tau())
        }
    }
}

// ---------------------------------------------------------------------------
// Gauss-Legendre quadrature
// ---------------------------------------------------------------------------

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1,1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 1..=n {
        let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i - 1] = x;
        weights[i - 1] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Expectation of `f(X1,X2)` under Uniform(-1,1)^2 via the tensor rule.
pub fn quad2(n: usize, f: impl Fn(f64, f64) -> f64) -> f64 {
    let (xs, ws) = gauss_legendre(n);
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            sum += ws[i] * ws[j] * f(xs[i], xs[j]);
        }
    }
    sum / 4.0
}

// ---------------------------------------------------------------------------
// Exact enumeration of the discrete scenario
// ---------------------------------------------------------------------------

/// One support point of the fused-data law.
#[derive(Debug, Clone)]
pub struct Atom {
    pub s: u8,
    pub z: u8,
    pub y: f64,
    pub x: Vec<f64>,
    pub prob: f64,
}

/// The exact distribution of the discrete scenario over its (at most) 32
/// support atoms, with the implied true estimands and oracle nuisances.
pub struct Population {
    pub atoms: Vec<Atom>,
    pub rho: f64,
    oracle: NuisanceModel,
    taus: [f64; 3],
}

impl Population {
    pub fn mean(&self, f: impl Fn(&Atom) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.prob * f(a)).sum()
    }

    pub fn true_tau(&self, kind: EstimandKind) -> f64 {
        match kind {
            EstimandKind::Rct => self.taus[0],
            EstimandKind::Obs => self.taus[1],
            EstimandKind::Tgt => self.taus[2],
        }
    }

    pub fn oracle(&self) -> &NuisanceModel {
        &self.oracle
    }
}

/// Brute-force probability table for the discrete scenario.
pub fn enumerate_population(spec: &ScenarioSpec) -> Result<Population, SimulationError> {
    if spec.kind != ScenarioKind::Discrete {
        return Err(SimulationError::UnsupportedScenario("exact enumeration"));
    }
    spec.validate()?;
    let tables = DiscreteTables::build(spec);
    let rho = tables.rho;
    let mut atoms = Vec::with_capacity(32);
    for (i, x) in discrete_cells().iter().enumerate() {
        for z in 0..2usize {
            for y in 0..2usize {
                let yf = y as f64;
                // experimental stratum: unselected law
                let pz = if z == 1 { tables.e[i] } else { 1.0 - tables.e[i] };
                let py = if y == 1 { tables.m1[i][z] } else { 1.0 - tables.m1[i][z] };
                atoms.push(Atom {
                    s: 1,
                    z: z as u8,
                    y: yf,
                    x: x.to_vec(),
                    prob: rho * 0.25 * pz * py,
                });
                // observational stratum: selection-tilted law
                let pz0 = if z == 1 { tables.q[i] } else { 1.0 - tables.q[i] };
                let py0 = if y == 1 { tables.m0[i][z] } else { 1.0 - tables.m0[i][z] };
                atoms.push(Atom {
                    s: 0,
                    z: z as u8,
                    y: yf,
                    x: x.to_vec(),
                    prob: (1.0 - rho) * tables.px_obs[i] * pz0 * py0,
                });
            }
        }
    }
    let taus = tables.true_taus();
    let oracle = NuisanceModel::from_oracle(Arc::new(DiscreteOracle { tables }), rho, None);
    Ok(Population { atoms, rho, oracle, taus })
}

// ---------------------------------------------------------------------------
// Benchmark harness
// ---------------------------------------------------------------------------

/// Feasible (oracle-free) learner wiring for each scenario.
pub fn feasible_spec(kind: ScenarioKind) -> LearnedSpec {
    match kind {
        ScenarioKind::Discrete => {
            LearnedSpec::discrete_default(Arc::new(binary_scenario_propensity))
        }
        ScenarioKind::Continuous => LearnedSpec {
            p: LearnerSpec::Irls { degree: 2 },
            e: LearnerSpec::KnownFn(Arc::new(binary_scenario_propensity)),
            q: LearnerSpec::Irls { degree: 2 },
            m10: LearnerSpec::Irls { degree: 2 },
            m01: LearnerSpec::Irls { degree: 2 },
            m00: LearnerSpec::Irls { degree: 2 },
            m11: LearnerSpec::Irls { degree: 2 },
            restriction: RestrictionSpec::M5,
            variance: VarianceSpec::FromBinaryMean,
            irls: IrlsOptions::default(),
            truncate: true,
        },
        ScenarioKind::M4Synthetic { .. } => {
            let params = M4Params { homoskedastic: false };
            LearnedSpec {
                p: LearnerSpec::Irls { degree: 1 },
                e: LearnerSpec::KnownConst(params.e()),
                q: LearnerSpec::Irls { degree: 1 },
                m10: LearnerSpec::Irls { degree: 2 },
                m01: LearnerSpec::Irls { degree: 2 },
                m00: LearnerSpec::Irls { degree: 2 },
                m11: LearnerSpec::Irls { degree: 2 },
                restriction: RestrictionSpec::M4 { psi: params.psi() },
                variance: VarianceSpec::LogGlm { psi: params.psi() },
                irls: IrlsOptions::default(),
                truncate: true,
            }
        }
    }
}

fn scenario_restriction(kind: ScenarioKind) -> RestrictionKind {
    match kind {
        ScenarioKind::M4Synthetic { .. } => RestrictionKind::M4,
        _ => RestrictionKind::M5,
    }
}

fn scenario_probes(kind: ScenarioKind) -> CvProbes {
    match kind {
        ScenarioKind::Discrete => CvProbes::DiscreteCells,
        _ => CvProbes::ContinuousSample { count: 50 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Feasible,
    Oracle,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Feasible => "feasible",
            Variant::Oracle => "oracle",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub methods: Vec<Method>,
    pub variants: Vec<Variant>,
    pub kinds: Vec<EstimandKind>,
    pub replicates: usize,
    pub bootstrap: usize,
    pub k_folds: usize,
    /// 0 means all available parallelism.
    pub jobs: usize,
    /// One control-variate adjustment factor is calibrated per scenario,
    /// from replicates drawn at this experimental sample size, and reused
    /// at every benchmarked size. `None` calibrates at the run's own size.
    pub cv_calibration_n_rct: Option<usize>,
    pub progress: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            methods: vec![Method::Baseline, Method::EffM5, Method::ControlVariate],
            variants: vec![Variant::Feasible, Variant::Oracle],
            kinds: EstimandKind::ALL.to_vec(),
            replicates: 1000,
            bootstrap: 1000,
            k_folds: 5,
            jobs: 0,
            cv_calibration_n_rct: Some(1000),
            progress: false,
        }
    }
}

/// One per-replicate estimate row.
#[derive(Debug, Clone)]
pub struct RepRow {
    pub replicate: usize,
    pub method: Method,
    pub variant: Variant,
    pub kind: EstimandKind,
    pub tau_hat: f64,
    pub adjustment: f64,
    pub tau_baseline: f64,
}

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub method: Method,
    pub variant: Variant,
    pub kind: EstimandKind,
    pub mse: f64,
    pub re: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug)]
pub struct BenchmarkResult {
    pub scenario: String,
    pub n_rct: usize,
    pub m_obs: usize,
    pub replicates: usize,
    pub true_tau: Vec<(EstimandKind, f64)>,
    pub rows: Vec<RepRow>,
    pub summaries: Vec<SummaryRow>,
    pub n_fail: usize,
    pub failures: Vec<(usize, String)>,
}

fn validate_benchmark(spec: &ScenarioSpec, config: &BenchmarkConfig) -> Result<(), SimulationError> {
    spec.validate()?;
    if config.replicates < 2 {
        return Err(SimulationError::InvalidSpec("need at least 2 replicates".into()));
    }
    if config.k_folds < 2 {
        return Err(SimulationError::InvalidSpec("need at least 2 folds".into()));
    }
    if config.kinds.is_empty() {
        return Err(SimulationError::InvalidSpec("no estimand kinds requested".into()));
    }
    if config.variants.is_empty() {
        return Err(SimulationError::InvalidSpec("no variants requested".into()));
    }
    for method in &config.methods {
        let ok = match method {
            Method::Baseline => true,
            Method::EffM5 | Method::ControlVariate => {
                !matches!(spec.kind, ScenarioKind::M4Synthetic { .. })
            }
            Method::EffM4 => matches!(spec.kind, ScenarioKind::M4Synthetic { .. }),
        };
        if !ok {
            return Err(SimulationError::InvalidSpec(format!(
                "method {method} is not defined for the {} scenario",
                spec.kind.label()
            )));
        }
    }
    Ok(())
}

#[derive(Clone)]
struct ReplicateSetup {
    spec: ScenarioSpec,
    methods: Vec<Method>,
    variants: Vec<Variant>,
    kinds: Vec<EstimandKind>,
    k_folds: usize,
    oracle: NuisanceModel,
    feasible: LearnedSpec,
    probes: CvProbes,
    psi: Option<PsiSpec>,
    /// gamma[(variant, kind)] once calibration has run
    gamma: Vec<((Variant, EstimandKind), Vec<f64>)>,
}

impl ReplicateSetup {
    fn gamma_for(&self, variant: Variant, kind: EstimandKind) -> Option<&[f64]> {
        self.gamma
            .iter()
            .find(|((v, k), _)| *v == variant && *k == kind)
            .map(|(_, g)| g.as_slice())
    }

    fn needs_feasible_bundle(&self) -> bool {
        self.variants.contains(&Variant::Feasible)
    }

    fn needs_cv(&self) -> bool {
        self.methods.contains(&Method::ControlVariate)
    }

    fn bundles(
        &self,
        data: &Dataset,
        rng: &mut ChaCha8Rng,
    ) -> Result<(CrossFitBundle, Option<CrossFitBundle>), SimulationError> {
        let folds = make_folds(data.n(), self.k_folds, rng)?;
        let restriction = scenario_restriction(self.spec.kind);
        let oracle_bundle =
            CrossFitBundle::from_oracle(folds.clone(), self.oracle.clone(), restriction);
        let feasible_bundle = if self.needs_feasible_bundle() {
            Some(cross_fit(data, &folds, &self.feasible)?)
        } else {
            None
        };
        Ok((oracle_bundle, feasible_bundle))
    }

    fn estimate(
        &self,
        data: &Dataset,
        bundle: &CrossFitBundle,
        method: Method,
        kind: EstimandKind,
    ) -> Result<EstimateReport, SimulationError> {
        Ok(match method {
            Method::Baseline => fit_baseline(data, bundle, kind)?,
            Method::EffM5 => one_step_m5(data, bundle, kind)?,
            Method::EffM4 => {
                let psi = self.psi.as_ref().expect("m4 scenario carries psi");
                one_step_m4(data, bundle, kind, psi)?
            }
            Method::ControlVariate => unreachable!("handled by the caller"),
        })
    }

    /// Run every requested (method, variant, kind) on one replicate dataset.
    fn run_replicate(&self, r: usize, stream: u64) -> Result<Vec<RepRow>, SimulationError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, stream, r as u64));
        let data = generate(&self.spec, &mut rng)?;
        let (oracle_bundle, feasible_bundle) = self.bundles(&data, &mut rng)?;
        let full_fit = if self.needs_cv() {
            Some(fit_full(&data, &self.feasible.for_cv_refit())?)
        } else {
            None
        };
        // The control-variate statistic is a function of the data alone, so
        // it is computed once and shared by both variants.
        let cv_stat = if self.needs_cv() {
            Some(cv_statistic(&data, full_fit.as_ref().unwrap(), &self.probes, &mut rng)?)
        } else {
            None
        };

        let mut rows = Vec::new();
        for &variant in &self.variants {
            let bundle = match variant {
                Variant::Oracle => &oracle_bundle,
                Variant::Feasible => feasible_bundle.as_ref().expect("requested above"),
            };
            for &kind in &self.kinds {
                for &method in &self.methods {
                    let report = match method {
                        Method::ControlVariate => {
                            let baseline = fit_baseline(&data, bundle, kind)?;
                            let gamma = self.gamma_for(variant, kind).ok_or_else(|| {
                                SimulationError::InvalidSpec(
                                    "control variate requires a calibrated gamma".into(),
                                )
                            })?;
                            apply_control_variate(&baseline, cv_stat.as_ref().unwrap(), gamma)?
                        }
                        _ => self.estimate(&data, bundle, method, kind)?,
                    };
                    debug_assert!(report.one_step_identity_holds());
                    rows.push(RepRow {
                        replicate: r,
                        method,
                        variant,
                        kind,
                        tau_hat: report.tau_hat,
                        adjustment: report.adjustment,
                        tau_baseline: report.tau_baseline,
                    });
                }
            }
        }
        Ok(rows)
    }

    /// Calibration pass: baseline estimates per variant/kind plus the
    /// control-variate statistic, on an independent replicate stream.
    fn run_calibration(&self, r: usize) -> Result<CalPoint, SimulationError> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, STREAM_CALIBRATE, r as u64));
        let data = generate(&self.spec, &mut rng)?;
        let (oracle_bundle, feasible_bundle) = self.bundles(&data, &mut rng)?;
        let full_fit = fit_full(&data, &self.feasible.for_cv_refit())?;
        let stat = cv_statistic(&data, &full_fit, &self.probes, &mut rng)?;
        let mut baselines = Vec::new();
        for &variant in &self.variants {
            let bundle = match variant {
                Variant::Oracle => &oracle_bundle,
                Variant::Feasible => feasible_bundle.as_ref().expect("requested above"),
            };
            for &kind in &self.kinds {
                let rep = fit_baseline(&data, bundle, kind)?;
                baselines.push(((variant, kind), rep.tau_hat));
            }
        }
        Ok(CalPoint { baselines, lambda: stat.lambda })
    }
}

struct CalPoint {
    baselines: Vec<((Variant, EstimandKind), f64)>,
    lambda: Vec<f64>,
}

fn run_parallel<T: Send>(
    jobs: usize,
    total: usize,
    progress: bool,
    label: &str,
    task: impl Fn(usize) -> T + Sync,
) -> Vec<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool");
    let done = AtomicUsize::new(0);
    let mut indexed: Vec<(usize, T)> = pool.install(|| {
        (0..total)
            .into_par_iter()
            .map(|r| {
                let out = task(r);
                if progress {
                    let d = done.fetch_add(1, Ordering::Relaxed) + 1;
                    if d % 25 == 0 || d == total {
                        eprint!("\r{label}: {d}/{total}");
                    }
                }
                (r, out)
            })
            .collect()
    });
    if progress {
        eprintln!();
    }
    indexed.sort_by_key(|(r, _)| *r);
    indexed.into_iter().map(|(_, t)| t).collect()
}

/// Monte Carlo benchmark: R replicates per method/variant/kind, MSE against
/// the true estimand, relative efficiencies with percentile bootstrap
/// confidence intervals. Deterministic for a fixed config regardless of the
/// worker count.
pub fn run_benchmark(
    spec: &ScenarioSpec,
    config: &BenchmarkConfig,
) -> Result<BenchmarkResult, SimulationError> {
    validate_benchmark(spec, config)?;
    let mut methods = config.methods.clone();
    if !methods.contains(&Method::Baseline) {
        methods.insert(0, Method::Baseline);
    }
    methods.dedup();

    let psi = match spec.kind {
        ScenarioKind::M4Synthetic { homoskedastic } => Some(M4Params { homoskedastic }.psi()),
        _ => None,
    };
    let mut setup = ReplicateSetup {
        spec: *spec,
        methods,
        variants: config.variants.clone(),
        kinds: config.kinds.clone(),
        k_folds: config.k_folds,
        oracle: oracle_nuisances(spec)?,
        feasible: feasible_spec(spec.kind),
        probes: scenario_probes(spec.kind),
        psi,
        gamma: Vec::new(),
    };

    // Pre-estimate the control-variate adjustment factor on an independent
    // calibration stream of the same length, drawn at the scenario's
    // calibration size.
    if setup.needs_cv() {
        let mut cal_setup = setup.clone();
        if let Some(n_cal) = config.cv_calibration_n_rct {
            cal_setup.spec.n_rct = n_cal;
            cal_setup.spec.validate()?;
            cal_setup.oracle = oracle_nuisances(&cal_setup.spec)?;
        }
        let cals = run_parallel(config.jobs, config.replicates, config.progress, "calibrate", |r| {
            cal_setup.run_calibration(r)
        });
        let mut ok = Vec::new();
        for cal in cals {
            match cal {
                Ok(c) => ok.push(c),
                Err(_) => {}
            }
        }
        if ok.len() < 2 {
            return Err(SimulationError::InvalidSpec(
                "too few successful calibration replicates for the control variate".into(),
            ));
        }
        for &variant in &config.variants {
            for &kind in &config.kinds {
                let pairs: Vec<(f64, Vec<f64>)> = ok
                    .iter()
                    .map(|c| {
                        let tau = c
                            .baselines
                            .iter()
                            .find(|((v, k), _)| *v == variant && *k == kind)
                            .map(|(_, t)| *t)
                            .expect("calibration covers every variant/kind");
                        (tau, c.lambda.clone())
                    })
                    .collect();
                let gamma = estimate_gamma(&pairs)?;
                setup.gamma.push(((variant, kind), gamma));
            }
        }
    }

    let outcomes = run_parallel(config.jobs, config.replicates, config.progress, "replicate", |r| {
        setup.run_replicate(r, STREAM_REPLICATE)
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(mut rep) => rows.append(&mut rep),
            Err(e) => failures.push((r, e.to_string())),
        }
    }

    let true_tau: Vec<(EstimandKind, f64)> = {
        let mut v = Vec::new();
        for &kind in &config.kinds {
            v.push((kind, true_tau(spec, kind)?));
        }
        v
    };
    let summaries = summarize(
        &rows,
        &true_tau,
        &setup.methods,
        &config.variants,
        &config.kinds,
        config.bootstrap,
        derive_seed(spec.seed, STREAM_BOOTSTRAP, 0),
    );

    Ok(BenchmarkResult {
        scenario: spec.kind.label().to_string(),
        n_rct: spec.n_rct,
        m_obs: spec.m_obs,
        replicates: config.replicates,
        true_tau,
        rows,
        summaries,
        n_fail: failures.len(),
        failures,
    })
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac
    }
}

pub(crate) fn summarize(
    rows: &[RepRow],
    true_tau: &[(EstimandKind, f64)],
    methods: &[Method],
    variants: &[Variant],
    kinds: &[EstimandKind],
    b_boot: usize,
    boot_seed: u64,
) -> Vec<SummaryRow> {
    let tau_of = |kind: EstimandKind| -> f64 {
        true_tau
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, t)| *t)
            .expect("true tau for every kind")
    };

    // squared errors per (method, variant, kind), keyed by replicate order
    let mut errs: Vec<((Method, Variant, EstimandKind), Vec<f64>)> = Vec::new();
    for &variant in variants {
        for &kind in kinds {
            for &method in methods {
                let e: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.method == method && r.variant == variant && r.kind == kind)
                    .map(|r| {
                        let d = r.tau_hat - tau_of(kind);
                        d * d
                    })
                    .collect();
                errs.push(((method, variant, kind), e));
            }
        }
    }
    let errs_of = |m: Method, v: Variant, k: EstimandKind| -> &Vec<f64> {
        &errs
            .iter()
            .find(|((mm, vv, kk), _)| *mm == m && *vv == v && *kk == k)
            .expect("errors present")
            .1
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(boot_seed);
    for &variant in variants {
        for &kind in kinds {
            let base_errs = errs_of(Method::Baseline, variant, kind);
            if base_errs.is_empty() {
                continue;
            }
            let n_ok = base_errs.len();
            // joint bootstrap index draws shared by all methods of this
            // (variant, kind) so the efficiency ratios stay coherent
            let resamples: Vec<Vec<usize>> = (0..b_boot)
                .map(|_| (0..n_ok).map(|_| rng.random_range(0..n_ok)).collect())
                .collect();
            for &method in methods {
                let m_errs = errs_of(method, variant, kind);
                if m_errs.len() != n_ok {
                    continue;
                }
                let mse = mean(m_errs);
                let re = mean(base_errs) / mse;
                let (ci_lo, ci_hi) = if method == Method::Baseline {
                    (1.0, 1.0)
                } else if b_boot == 0 {
                    (re, re)
                } else {
                    let mut res: Vec<f64> = resamples
                        .iter()
                        .map(|idx| {
                            let mb = idx.iter().map(|&i| base_errs[i]).sum::<f64>();
                            let mm = idx.iter().map(|&i| m_errs[i]).sum::<f64>();
                            mb / mm
                        })
                        .collect();
                    res.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    (quantile(&res, 0.025), quantile(&res, 0.975))
                };
                out.push(SummaryRow {
                    method,
                    variant,
                    kind,
                    mse,
                    re,
                    ci_lo,
                    ci_hi,
                });
            }
        }
    }
    out
}

impl BenchmarkResult {
    pub fn summary(&self, method: Method, variant: Variant, kind: EstimandKind) -> Option<&SummaryRow> {
        self.summaries
            .iter()
            .find(|s| s.method == method && s.variant == variant && s.kind == kind)
    }

    pub fn replicates_table(&self) -> Table {
        let mut t = Table::new([
            "replicate",
            "method",
            "variant",
            "kind",
            "tau_hat",
            "adjustment",
            "tau_baseline",
        ]);
        for r in &self.rows {
            t.push(vec![
                Cell::Int(r.replicate as i64),
                Cell::Text(r.method.label().into()),
                Cell::Text(r.variant.label().into()),
                Cell::Text(r.kind.label().into()),
                Cell::Float(r.tau_hat),
                Cell::Float(r.adjustment),
                Cell::Float(r.tau_baseline),
            ]);
        }
        t
    }

    pub fn summary_table(&self) -> Table {
        let mut t = Table::new([
            "scenario",
            "n_rct",
            "m_obs",
            "method",
            "variant",
            "kind",
            "true_tau",
            "mse",
            "re",
            "ci_lo",
            "ci_hi",
            "n_fail",
        ]);
        for s in &self.summaries {
            let tau = self
                .true_tau
                .iter()
                .find(|(k, _)| *k == s.kind)
                .map(|(_, t)| *t)
                .unwrap_or(f64::NAN);
            t.push(vec![
                Cell::Text(self.scenario.clone()),
                Cell::Int(self.n_rct as i64),
                Cell::Int(self.m_obs as i64),
                Cell::Text(s.method.label().into()),
                Cell::Text(s.variant.label().into()),
                Cell::Text(s.kind.label().into()),
                Cell::Float(tau),
                Cell::Float(s.mse),
                Cell::Float(s.re),
                Cell::Float(s.ci_lo),
                Cell::Float(s.ci_hi),
                Cell::Int(self.n_fail as i64),
            ]);
        }
        t
    }

    /// JSON summary document. `generated_at` is the only non-deterministic
    /// field; pass `None` for byte-stable output.
    pub fn summary_json(&self, generated_at: Option<&str>) -> serde_json::Value {
        let results: Vec<serde_json::Value> = self
            .summaries
            .iter()
            .map(|s| {
                serde_json::json!({
                    "method": s.method.label(),
                    "variant": s.variant.label(),
                    "kind": s.kind.label(),
                    "mse": s.mse,
                    "re": s.re,
                    "ci_lo": s.ci_lo,
                    "ci_hi": s.ci_hi,
                    "n_fail": self.n_fail,
                })
            })
            .collect();
        let mut doc = serde_json::json!({
            "scenario": self.scenario,
            "n_rct": self.n_rct,
            "m_obs": self.m_obs,
            "replicates": self.replicates,
            "n_fail": self.n_fail,
            "true_tau": self.true_tau.iter().map(|(k, t)| (k.label().to_string(), *t)).collect::<std::collections::BTreeMap<_, _>>(),
            "results": results,
        });
        if let Some(ts) = generated_at {
            doc["generated_at"] = serde_json::Value::String(ts.to_string());
        }
        doc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::influence::{phi0, KernelContext};

    fn discrete_spec(n_rct: usize, seed: u64) -> ScenarioSpec {
        ScenarioSpec::new(ScenarioKind::Discrete, n_rct, seed)
    }

    #[test]
    fn selection_keep_frequency_binomial() {
        let spec = discrete_spec(100, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pool: Vec<FusedObservation> = (0..100_000)
            .map(|i| FusedObservation { s: 0, z: 0, y: (i % 2) as f64, x: vec![0.0, 0.0] })
            .collect();
        let kept = apply_selection(&pool, &spec, &mut rng).unwrap();
        let kept_cases = kept.iter().filter(|r| r.y == 1.0).count() as f64;
        let kept_controls = kept.iter().filter(|r| r.y == 0.0).count() as f64;
        let n = 50_000.0_f64;
        // 3-sigma binomial bounds
        let sd_case = (n * 0.9 * 0.1).sqrt();
        let sd_ctrl = (n * 0.1 * 0.9).sqrt();
        assert!((kept_cases - 0.9 * n).abs() < 3.0 * sd_case, "cases kept {kept_cases}");
        assert!((kept_controls - 0.1 * n).abs() < 3.0 * sd_ctrl, "controls kept {kept_controls}");

        // degenerate keeps
        let mut all = spec;
        all.case_keep = 1.0 - 1e-12;
        all.control_keep = 1.0 - 1e-12;
        let kept = apply_selection(&pool[..100], &all, &mut rng).unwrap();
        assert_eq!(kept.len(), 100);
    }

    #[test]
    fn gen_discrete_is_deterministic_and_sized() {
        let spec = discrete_spec(500, 42);
        let a = gen_discrete(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = gen_discrete(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.n(), spec.n_rct + spec.m_obs);
        assert_eq!(a.n_rct(), 500);
        assert_eq!(a.n_obs(), 3000);
        for (ra, rb) in a.rows().iter().zip(b.rows()) {
            assert_eq!(ra, rb);
        }
        // selection favors cases among retained observational rows
        let frac_obs = a.rows().iter().filter(|r| r.s == 0 && r.y == 1.0).count() as f64
            / a.n_obs() as f64;
        let frac_rct = a.rows().iter().filter(|r| r.s == 1 && r.y == 1.0).count() as f64
            / a.n_rct() as f64;
        assert!(frac_obs > frac_rct);
    }

    #[test]
    fn gen_discrete_marginal_matches_expit_half() {
        // P(Y=1 | X1=X2, Z=1) = expit(0.5) in unselected rows
        let spec = discrete_spec(60_000, 3);
        let data = gen_discrete(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut hits = 0usize;
        let mut total = 0usize;
        for r in data.rows() {
            if r.s == 1 && r.z == 1 && r.x[0] == r.x[1] {
                total += 1;
                hits += (r.y == 1.0) as usize;
            }
        }
        let p_hat = hits as f64 / total as f64;
        let p_true = expit(0.5);
        let sd = (p_true * (1.0 - p_true) / total as f64).sqrt();
        assert!((p_hat - p_true).abs() < 3.0 * sd, "p_hat={p_hat} vs {p_true}");
    }

    #[test]
    fn gen_continuous_support_and_interaction_sign() {
        let spec = ScenarioSpec::new(ScenarioKind::Continuous, 200, 9);
        let data = gen_continuous(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(data
            .rows()
            .iter()
            .all(|r| r.x.iter().all(|&v| (-1.0..1.0).contains(&v))));
        // at x = 0: P(Y=1|Z=1) = expit(0.5)
        assert!((continuous_outcome_prob(&[0.0, 0.0], 1.0) - expit(0.5)).abs() < 1e-15);
        // finite-difference probe of d logit / d(x1 x2) = 1.5 z - 1
        let h = 1e-6;
        for (z, want) in [(0.0, -1.0), (1.0, 0.5)] {
            let base = continuous_outcome_logit(&[0.3, 0.4], z);
            let bumped = continuous_outcome_logit(&[0.3 + h / 0.4, 0.4], z);
            // bumping x1 by h/x2 changes x1*x2 by h and x1-x2 by h/0.4
            let d_interaction = (bumped - base - (1.0 - 2.0 * z) * (h / 0.4)) / h;
            assert!((d_interaction - want).abs() < 1e-4, "z={z}: {d_interaction}");
        }
    }

    #[test]
    fn enumeration_is_a_probability_law() {
        let pop = enumerate_population(&discrete_spec(3000, 0)).unwrap();
        let total = pop.mean(|_| 1.0);
        assert!((total - 1.0).abs() < 1e-14);
        // plug-in identity: tau_rct equals the CATE averaged over the
        // experimental covariate law
        let taus = pop.true_tau(EstimandKind::Rct);
        let by_hand: f64 = discrete_cells()
            .iter()
            .map(|x| 0.25 * (discrete_outcome_prob(x, 1.0) - discrete_outcome_prob(x, 0.0)))
            .sum();
        assert!((taus - by_hand).abs() < 1e-14);
    }

    #[test]
    fn enumeration_satisfies_odds_ratio_identity() {
        let pop = enumerate_population(&discrete_spec(3000, 0)).unwrap();
        for x in discrete_cells() {
            let eta = pop.oracle().at(&x);
            let gap = crate::nuisance::logit(eta.m11) - crate::nuisance::logit(eta.m10)
                - crate::nuisance::logit(eta.m01)
                + crate::nuisance::logit(eta.m00);
            assert!(gap.abs() < 1e-12, "cell {x:?}: {gap}");
        }
    }

    #[test]
    fn oracle_q_matches_enumeration() {
        let pop = enumerate_population(&discrete_spec(900, 0)).unwrap();
        for x in discrete_cells() {
            let eta = pop.oracle().at(&x);
            // conditional frequency from the atoms directly
            let num = pop.mean(|a| ((a.s == 0 && a.z == 1 && a.x == x) as u8) as f64);
            let den = pop.mean(|a| ((a.s == 0 && a.x == x) as u8) as f64);
            assert!((eta.q - num / den).abs() < 1e-13);
        }
    }

    #[test]
    fn oracle_mean_zero_gradients() {
        let pop = enumerate_population(&discrete_spec(3000, 0)).unwrap();
        for kind in EstimandKind::ALL {
            let tau = pop.true_tau(kind);
            let ctx = KernelContext::new(kind, tau, pop.rho).unwrap();
            let mean = pop.mean(|a| phi0(a.s, a.z, a.y, &pop.oracle().at(&a.x), &ctx).unwrap());
            assert!(mean.abs() < 1e-10, "{kind}: {mean}");
        }
    }

    #[test]
    fn no_selection_means_equal_arms() {
        let mut spec = discrete_spec(100, 0);
        spec.case_keep = 0.5;
        spec.control_keep = 0.5;
        let pop = enumerate_population(&spec).unwrap();
        for x in discrete_cells() {
            let eta = pop.oracle().at(&x);
            assert!((eta.m01 - eta.m11).abs() < 1e-14);
            assert!((eta.m00 - eta.m10).abs() < 1e-14);
        }
    }

    #[test]
    fn quadrature_converges() {
        // smooth integrand: compare 48 and 64 node rules
        let f = |a: f64, b: f64| (1.0 + a * b + a * a).ln() * expit(a - b);
        let v48 = quad2(48, f);
        let v64 = quad2(64, f);
        assert!((v48 - v64).abs() < 1e-12);
        // exact on polynomials: E[x1^2 x2^2] = 1/9
        assert!((quad2(16, |a, b| a * a * b * b) - 1.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn continuous_true_taus() {
        let spec = ScenarioSpec::new(ScenarioKind::Continuous, 3000, 0);
        let rct = true_tau(&spec, EstimandKind::Rct).unwrap();
        let obs = true_tau(&spec, EstimandKind::Obs).unwrap();
        let tgt = true_tau(&spec, EstimandKind::Tgt).unwrap();
        // values pinned by the 64^2 tensor quadrature (error << 1e-10)
        assert!((rct - 0.22396810).abs() < 1e-7, "tau_rct = {rct}");
        assert!((obs - 0.22089284).abs() < 1e-7, "tau_obs = {obs}");
        assert!((tgt - 0.5 * (rct + obs)).abs() < 1e-12);
    }

    #[test]
    fn m4_params_satisfy_confounding_identity() {
        for homo in [false, true] {
            let p = M4Params { homoskedastic: homo };
            let psi = p.psi();
            let theta = p.theta();
            for x in [[-0.7, 0.2], [0.0, 0.0], [0.9, -0.4]] {
                let dot: f64 = psi.eval(&x).iter().zip(&theta).map(|(a, b)| a * b).sum();
                let gap = p.m11(&x) - p.m10(&x) - p.m01(&x) + p.m00(&x) - dot;
                assert!(gap.abs() < 1e-12);
            }
        }
        // quadrature check of the closed-form true tau
        let p = M4Params { homoskedastic: false };
        let tau_quad = quad2(64, |a, b| p.cate(&[a, b]));
        assert!((tau_quad - p.true_tau()).abs() < 1e-12);
    }

    #[test]
    fn seed_derivation_separates_streams() {
        let a = derive_seed(7, STREAM_REPLICATE, 0);
        let b = derive_seed(7, STREAM_REPLICATE, 1);
        let c = derive_seed(7, STREAM_CALIBRATE, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, STREAM_REPLICATE, 0));
    }

    #[test]
    fn benchmark_baseline_only_degenerate() {
        let spec = discrete_spec(120, 5);
        let config = BenchmarkConfig {
            methods: vec![Method::Baseline],
            variants: vec![Variant::Oracle],
            kinds: vec![EstimandKind::Rct],
            replicates: 8,
            bootstrap: 50,
            k_folds: 2,
            jobs: 1,
            cv_calibration_n_rct: None,
            progress: false,
        };
        let result = run_benchmark(&spec, &config).unwrap();
        assert_eq!(result.n_fail, 0);
        let s = result.summary(Method::Baseline, Variant::Oracle, EstimandKind::Rct).unwrap();
        assert_eq!(s.re, 1.0);
        assert_eq!((s.ci_lo, s.ci_hi), (1.0, 1.0));
    }

    #[test]
    fn summarize_collapses_on_identical_replicates() {
        // two replicates with identical estimates: zero MSE variance, CI collapses
        let rows: Vec<RepRow> = (0..2)
            .flat_map(|r| {
                [
                    RepRow {
                        replicate: r,
                        method: Method::Baseline,
                        variant: Variant::Oracle,
                        kind: EstimandKind::Rct,
                        tau_hat: 0.3,
                        adjustment: 0.0,
                        tau_baseline: 0.3,
                    },
                    RepRow {
                        replicate: r,
                        method: Method::EffM5,
                        variant: Variant::Oracle,
                        kind: EstimandKind::Rct,
                        tau_hat: 0.25,
                        adjustment: 0.05,
                        tau_baseline: 0.3,
                    },
                ]
            })
            .collect();
        let summaries = summarize(
            &rows,
            &[(EstimandKind::Rct, 0.2)],
            &[Method::Baseline, Method::EffM5],
            &[Variant::Oracle],
            &[EstimandKind::Rct],
            100,
            1,
        );
        let eff = summaries
            .iter()
            .find(|s| s.method == Method::EffM5)
            .unwrap();
        assert!((eff.ci_lo - eff.re).abs() < 1e-12);
        assert!((eff.ci_hi - eff.re).abs() < 1e-12);
    }

    #[test]
    fn benchmark_determinism_across_jobs() {
        let spec = discrete_spec(150, 11);
        let config = |jobs| BenchmarkConfig {
            methods: vec![Method::Baseline, Method::EffM5, Method::ControlVariate],
            variants: vec![Variant::Feasible, Variant::Oracle],
            kinds: vec![EstimandKind::Rct, EstimandKind::Obs],
            replicates: 6,
            bootstrap: 40,
            k_folds: 3,
            jobs,
            cv_calibration_n_rct: None,
            progress: false,
        };
        let a = run_benchmark(&spec, &config(1)).unwrap();
        let b = run_benchmark(&spec, &config(4)).unwrap();
        assert_eq!(
            a.replicates_table().to_csv_string(),
            b.replicates_table().to_csv_string()
        );
        assert_eq!(a.summary_table().to_csv_string(), b.summary_table().to_csv_string());
        assert_eq!(
            a.summary_json(None).to_string(),
            b.summary_json(None).to_string()
        );
    }
}
