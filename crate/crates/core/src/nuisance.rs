//! Nuisance-function estimation: learners for (p, e, q, m_sz, V_sz),
//! cross-fitting management, probability truncation, and enforcement of the
//! outcome-mean restrictions (logit identity for outcome-mediated selection,
//! additive identity with a fitted confounding coefficient for linear
//! confounding bias).

use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dataset::{Dataset, FoldAssignment, OutcomeKind};
use crate::linalg::solve_sym_ridge;

#[derive(Debug, Error)]
pub enum NuisanceError {
    #[error("cell-mean learner requires covariates in {{0,1}}, got {value}")]
    NonDiscreteCovariates { value: f64 },
    #[error("cell-mean learner requires a binary target, got {value}")]
    NonBinaryTarget { value: f64 },
    #[error("regression requires at least one training row")]
    EmptyTraining,
    #[error("design matrix is singular even after ridge fallback")]
    SingularDesign,
    #[error("operation requires a binary outcome model")]
    NotBinaryOutcome,
    #[error("operation requires a continuous outcome model")]
    NotContinuousOutcome,
    #[error("dimension mismatch: theta has {theta} entries but psi has {psi}")]
    DimensionMismatch { theta: usize, psi: usize },
    #[error("no experimental (s=1) rows available")]
    NoRctRows,
    #[error("variance model has no training rows in any stratum")]
    EmptyStratum,
    #[error("invalid learner configuration: {0}")]
    ConflictingSpec(String),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<NuisanceError>,
    },
}

/// Logistic link `l(p) = log(p) - log(1-p)`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse logistic link.
pub fn expit(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the logistic link: `l'(p) = 1/(p(1-p))`.
pub fn logit_deriv(p: f64) -> f64 {
    1.0 / (p * (1.0 - p))
}

/// All nuisance-function values evaluated at one covariate point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisanceAt {
    /// P(S=1 | X=x)
    pub p: f64,
    /// P(Z=1 | S=1, X=x)
    pub e: f64,
    /// P(Z=1 | S=0, X=x)
    pub q: f64,
    pub m11: f64,
    pub m10: f64,
    pub m01: f64,
    pub m00: f64,
    pub v11: f64,
    pub v10: f64,
    pub v01: f64,
    pub v00: f64,
}

impl NuisanceAt {
    pub fn m(&self, s: u8, z: u8) -> f64 {
        match (s, z) {
            (1, 1) => self.m11,
            (1, 0) => self.m10,
            (0, 1) => self.m01,
            _ => self.m00,
        }
    }

    pub fn v(&self, s: u8, z: u8) -> f64 {
        match (s, z) {
            (1, 1) => self.v11,
            (1, 0) => self.v10,
            (0, 1) => self.v01,
            _ => self.v00,
        }
    }
}

/// One term of a basis expansion over the covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiTerm {
    Intercept,
    /// x_j (1-based in the surface syntax, stored 0-based)
    Var(usize),
    /// x_i * x_j
    Prod(usize, usize),
}

/// A basis expansion `psi(x)`, e.g. `intercept,x1,x2` or `intercept,x1,x1*x2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PsiSpec {
    terms: Vec<PsiTerm>,
}

impl PsiSpec {
    pub fn new(terms: Vec<PsiTerm>) -> Self {
        PsiSpec { terms }
    }

    /// Intercept plus each covariate additively.
    pub fn intercept_and_vars(d: usize) -> Self {
        let mut terms = vec![PsiTerm::Intercept];
        terms.extend((0..d).map(PsiTerm::Var));
        PsiSpec { terms }
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut terms = Vec::new();
        for raw in text.split(',') {
            let t = raw.trim();
            if t.is_empty() {
                continue;
            }
            if t.eq_ignore_ascii_case("intercept") || t == "1" {
                terms.push(PsiTerm::Intercept);
            } else if let Some((a, b)) = t.split_once('*') {
                terms.push(PsiTerm::Prod(parse_var(a)?, parse_var(b)?));
            } else {
                terms.push(PsiTerm::Var(parse_var(t)?));
            }
        }
        if terms.is_empty() {
            return Err("psi spec must contain at least one term".into());
        }
        Ok(PsiSpec { terms })
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.terms
            .iter()
            .map(|t| match *t {
                PsiTerm::Intercept => 1.0,
                PsiTerm::Var(j) => x[j],
                PsiTerm::Prod(i, j) => x[i] * x[j],
            })
            .collect()
    }

    pub fn max_var(&self) -> Option<usize> {
        self.terms
            .iter()
            .filter_map(|t| match *t {
                PsiTerm::Intercept => None,
                PsiTerm::Var(j) => Some(j),
                PsiTerm::Prod(i, j) => Some(i.max(j)),
            })
            .max()
    }
}

impl fmt::Display for PsiSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|t| match *t {
                PsiTerm::Intercept => "intercept".to_string(),
                PsiTerm::Var(j) => format!("x{}", j + 1),
                PsiTerm::Prod(i, j) => format!("x{}*x{}", i + 1, j + 1),
            })
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

fn parse_var(t: &str) -> Result<usize, String> {
    let t = t.trim();
    let idx: usize = t
        .strip_prefix('x')
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("cannot parse psi term `{t}` (expected intercept, xJ, or xI*xJ)"))?;
    if idx == 0 {
        return Err("covariates are numbered from x1".into());
    }
    Ok(idx - 1)
}

/// Polynomial feature map with all interactions up to a total degree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolyFeatures {
    d: usize,
    degree: usize,
    exponents: Vec<Vec<usize>>,
}

impl PolyFeatures {
    pub fn new(d: usize, degree: usize) -> Self {
        let mut exponents = Vec::new();
        let mut current = vec![0usize; d];
        gen_exponents(d, degree, 0, &mut current, &mut exponents);
        PolyFeatures { d, degree, exponents }
    }

    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.d);
        self.exponents
            .iter()
            .map(|exps| {
                exps.iter()
                    .zip(x)
                    .fold(1.0, |acc, (&e, &xi)| acc * xi.powi(e as i32))
            })
            .collect()
    }
}

fn gen_exponents(d: usize, budget: usize, pos: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if pos == d {
        out.push(current.clone());
        return;
    }
    for e in 0..=budget {
        current[pos] = e;
        gen_exponents(d, budget - e, pos + 1, current, out);
    }
    current[pos] = 0;
}

/// Clamp a fitted probability to `[1/sqrt(n), 1 - 1/sqrt(n)]` for `n` the
/// training size of the corresponding model. For n <= 4 the band is empty or
/// inverted; the midpoint 1/2 is returned instead.
pub fn truncate_probability(value: f64, n_train: usize) -> f64 {
    let lo = 1.0 / (n_train as f64).sqrt();
    let hi = 1.0 - lo;
    if !(lo < hi) {
        return 0.5;
    }
    value.clamp(lo, hi)
}

/// Fitted `m11` under the logit identity of the odds-ratio restriction.
pub fn m5_identity(m10: f64, m01: f64, m00: f64) -> f64 {
    expit(logit(m10) + logit(m01) - logit(m00))
}

/// Fitted `m11` under the additive identity of the linear confounding model.
pub fn m4_identity(m10: f64, m01: f64, m00: f64, psi_dot_theta: f64) -> f64 {
    m10 + m01 - m00 + psi_dot_theta
}

// ---------------------------------------------------------------------------
// Learners
// ---------------------------------------------------------------------------

/// Per-cell success/trial counts over binary covariates, predicting
/// `(successes + 1) / (trials + 2)`. A never-seen cell predicts 1/2.
#[derive(Debug, Clone, Default)]
pub struct CellMeanFit {
    cells: HashMap<u64, (f64, f64)>,
}

/// Fit the add-one/add-two smoothed cell-mean estimator.
pub fn fit_cell_mean<'a>(
    rows: impl Iterator<Item = (&'a [f64], f64)>,
) -> Result<CellMeanFit, NuisanceError> {
    let mut cells: HashMap<u64, (f64, f64)> = HashMap::new();
    for (x, y) in rows {
        let key = cell_key(x).ok_or_else(|| NuisanceError::NonDiscreteCovariates {
            value: *x.iter().find(|v| **v != 0.0 && **v != 1.0).unwrap_or(&f64::NAN),
        })?;
        if y != 0.0 && y != 1.0 {
            return Err(NuisanceError::NonBinaryTarget { value: y });
        }
        let entry = cells.entry(key).or_insert((0.0, 0.0));
        entry.0 += y;
        entry.1 += 1.0;
    }
    Ok(CellMeanFit { cells })
}

impl CellMeanFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let (succ, trials) = match cell_key(x) {
            Some(key) => self.cells.get(&key).copied().unwrap_or((0.0, 0.0)),
            None => (0.0, 0.0),
        };
        (succ + 1.0) / (trials + 2.0)
    }
}

fn cell_key(x: &[f64]) -> Option<u64> {
    if x.len() > 63 {
        return None;
    }
    let mut key = 0u64;
    for (j, &v) in x.iter().enumerate() {
        if v == 1.0 {
            key |= 1 << j;
        } else if v != 0.0 {
            return None;
        }
    }
    Some(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Logit,
    Identity,
}

#[derive(Debug, Clone, Copy)]
pub struct IrlsOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions { max_iter: 50, tol: 1e-8 }
    }
}

/// Regression fitted by iteratively reweighted least squares over a
/// polynomial feature map. The identity link degenerates to ordinary least
/// squares.
#[derive(Debug, Clone)]
pub struct IrlsFit {
    features: PolyFeatures,
    beta: DVector<f64>,
    link: Link,
    pub converged: bool,
    pub ridge_used: bool,
}

const MU_CLAMP: f64 = 1e-10;

pub fn fit_logistic_irls(
    xs: &[&[f64]],
    ys: &[f64],
    features: &PolyFeatures,
    link: Link,
    opts: IrlsOptions,
) -> Result<IrlsFit, NuisanceError> {
    let n = xs.len();
    if n == 0 {
        return Err(NuisanceError::EmptyTraining);
    }
    assert_eq!(ys.len(), n);
    let p = features.dim();
    let design = DMatrix::from_fn(n, p, |i, j| features.eval(xs[i])[j]);
    for v in design.iter() {
        if !v.is_finite() {
            return Err(NuisanceError::ConflictingSpec("feature map produced a non-finite value".into()));
        }
    }
    let y = DVector::from_column_slice(ys);

    let mut ridge_any = false;
    let solve_weighted = |w: &DVector<f64>, target: &DVector<f64>, ridge_any: &mut bool| {
        let mut gram = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        for i in 0..n {
            let wi = w[i];
            let row = design.row(i);
            for a in 0..p {
                rhs[a] += wi * row[a] * target[i];
                for b in a..p {
                    gram[(a, b)] += wi * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let (sol, ridge) = solve_sym_ridge(&gram, &rhs).map_err(|_| NuisanceError::SingularDesign)?;
        *ridge_any |= ridge;
        Ok::<DVector<f64>, NuisanceError>(sol)
    };

    match link {
        Link::Identity => {
            let w = DVector::from_element(n, 1.0);
            let beta = solve_weighted(&w, &y, &mut ridge_any)?;
            Ok(IrlsFit {
                features: features.clone(),
                beta,
                link,
                converged: true,
                ridge_used: ridge_any,
            })
        }
        Link::Logit => {
            let mut beta = DVector::zeros(p);
            let mut converged = false;
            for _ in 0..opts.max_iter {
                let eta = &design * &beta;
                let mut w = DVector::zeros(n);
                let mut z = DVector::zeros(n);
                for i in 0..n {
                    let mu = expit(eta[i]).clamp(MU_CLAMP, 1.0 - MU_CLAMP);
                    let wi = mu * (1.0 - mu);
                    w[i] = wi;
                    z[i] = eta[i] + (y[i] - mu) / wi;
                }
                let next = solve_weighted(&w, &z, &mut ridge_any)?;
                let delta = (&next - &beta).amax();
                beta = next;
                if delta < opts.tol {
                    converged = true;
                    break;
                }
            }
            Ok(IrlsFit {
                features: features.clone(),
                beta,
                link,
                converged,
                ridge_used: ridge_any,
            })
        }
    }
}

impl IrlsFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let phi = self.features.eval(x);
        let eta: f64 = phi.iter().zip(self.beta.iter()).map(|(a, b)| a * b).sum();
        match self.link {
            Link::Identity => eta,
            Link::Logit => expit(eta),
        }
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.beta.iter().copied().collect()
    }
}

/// A fitted regression for one nuisance function.
#[derive(Clone)]
pub enum Regressor {
    CellMean(CellMeanFit),
    Irls(IrlsFit),
    KnownConst(f64),
    KnownFn(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl Regressor {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Regressor::CellMean(f) => f.predict(x),
            Regressor::Irls(f) => f.predict(x),
            Regressor::KnownConst(v) => *v,
            Regressor::KnownFn(f) => f(x),
        }
    }

    /// Known values are declared exact and bypass truncation.
    fn is_known(&self) -> bool {
        matches!(self, Regressor::KnownConst(_) | Regressor::KnownFn(_))
    }
}

impl fmt::Debug for Regressor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regressor::CellMean(_) => write!(f, "CellMean"),
            Regressor::Irls(fit) => write!(f, "Irls(degree {})", fit.features.degree()),
            Regressor::KnownConst(v) => write!(f, "KnownConst({v})"),
            Regressor::KnownFn(_) => write!(f, "KnownFn"),
        }
    }
}

// ---------------------------------------------------------------------------
// Confounding coefficient and variance model
// ---------------------------------------------------------------------------

/// Weighted-least-squares fit of the confounding coefficient over the
/// experimental rows, with the inverse-propensity-weighted outcome contrast
/// minus the observational contrast as the regression target:
/// `y * (z/e* - (1-z)/(1-e*)) - (m01(x) - m00(x))` regressed on `psi(x)`.
///
/// The coefficient is deliberately not cross-fit; `m01_hat`/`m00_hat` must be
/// the per-row out-of-fold predictions.
pub fn theta_wls(
    data: &Dataset,
    m01_hat: &[f64],
    m00_hat: &[f64],
    psi: &PsiSpec,
    e_star: f64,
) -> Result<Vec<f64>, NuisanceError> {
    assert_eq!(m01_hat.len(), data.n());
    assert_eq!(m00_hat.len(), data.n());
    if !(e_star > 0.0 && e_star < 1.0) {
        return Err(NuisanceError::ConflictingSpec(format!(
            "known constant propensity must lie in (0,1), got {e_star}"
        )));
    }
    let q = psi.dim();
    let mut gram = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    let mut any = false;
    for (i, row) in data.rows().iter().enumerate() {
        if row.s != 1 {
            continue;
        }
        any = true;
        let ipw = row.y * (row.z as f64 / e_star - (1.0 - row.z as f64) / (1.0 - e_star));
        let target = ipw - (m01_hat[i] - m00_hat[i]);
        let phi = psi.eval(&row.x);
        for a in 0..q {
            rhs[a] += phi[a] * target;
            for b in a..q {
                gram[(a, b)] += phi[a] * phi[b];
            }
        }
    }
    if !any {
        return Err(NuisanceError::NoRctRows);
    }
    for a in 0..q {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let (theta, _) = solve_sym_ridge(&gram, &rhs).map_err(|_| NuisanceError::SingularDesign)?;
    Ok(theta.iter().copied().collect())
}

/// Log-link GLM coefficients fitted by Fisher scoring with gamma-style
/// weights (unit working weights, multiplicative working residuals).
#[derive(Debug, Clone)]
struct LogGlmFit {
    beta: DVector<f64>,
    converged: bool,
}

const ETA_CLAMP: f64 = 30.0;

fn fit_log_glm(points: &[(Vec<f64>, f64)], opts: IrlsOptions) -> Result<LogGlmFit, NuisanceError> {
    let n = points.len();
    if n == 0 {
        return Err(NuisanceError::EmptyTraining);
    }
    let p = points[0].0.len();
    let design = DMatrix::from_fn(n, p, |i, j| points[i].0[j]);
    let y = DVector::from_fn(n, |i, _| points[i].1);

    let mean_y = y.iter().sum::<f64>() / n as f64;
    let mut beta = DVector::zeros(p);
    // Feature maps here always lead with an intercept column.
    beta[0] = mean_y.max(1e-12).ln();

    let mut converged = false;
    for _ in 0..opts.max_iter {
        let eta = &design * &beta;
        let mut z = DVector::zeros(n);
        for i in 0..n {
            let ei = eta[i].clamp(-ETA_CLAMP, ETA_CLAMP);
            let mu = ei.exp();
            z[i] = ei + (y[i] - mu) / mu;
        }
        let mut gram = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        for i in 0..n {
            let row = design.row(i);
            for a in 0..p {
                rhs[a] += row[a] * z[i];
                for b in a..p {
                    gram[(a, b)] += row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let (next, _) = solve_sym_ridge(&gram, &rhs).map_err(|_| NuisanceError::SingularDesign)?;
        let delta = (&next - &beta).amax();
        beta = next;
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(LogGlmFit { beta, converged })
}

/// Variance model for continuous outcomes: one log-link GLM per (s,z)
/// stratum predicting squared cross-fit residuals from `psi_v(x)`. An empty
/// stratum falls back to the pooled fit and is flagged.
#[derive(Debug, Clone)]
pub struct VarianceGlm {
    psi: PsiSpec,
    fits: [Option<LogGlmFit>; 4],
    pooled: LogGlmFit,
    pub empty_strata: bool,
    pub converged: bool,
}

fn stratum_index(s: u8, z: u8) -> usize {
    (s as usize) * 2 + z as usize
}

/// Fit the stratified variance GLM on the rows `train` of `data`, where
/// `resid_sq_all[i]` is the squared cross-fit residual of row `i`.
pub fn fit_variance_glm(
    data: &Dataset,
    train: &[usize],
    resid_sq_all: &[f64],
    psi: &PsiSpec,
    opts: IrlsOptions,
) -> Result<VarianceGlm, NuisanceError> {
    if data.outcome_kind() != OutcomeKind::Continuous {
        return Err(NuisanceError::NotContinuousOutcome);
    }
    if train.is_empty() {
        return Err(NuisanceError::EmptyStratum);
    }
    let mut per: [Vec<(Vec<f64>, f64)>; 4] = Default::default();
    let mut pooled = Vec::with_capacity(train.len());
    for &i in train {
        let row = &data.rows()[i];
        let phi = psi.eval(&row.x);
        per[stratum_index(row.s, row.z)].push((phi.clone(), resid_sq_all[i]));
        pooled.push((phi, resid_sq_all[i]));
    }
    let pooled_fit = fit_log_glm(&pooled, opts)?;
    let mut fits: [Option<LogGlmFit>; 4] = Default::default();
    let mut empty = false;
    let mut converged = pooled_fit.converged;
    for (idx, pts) in per.iter().enumerate() {
        if pts.is_empty() {
            empty = true;
            continue;
        }
        let fit = fit_log_glm(pts, opts)?;
        converged &= fit.converged;
        fits[idx] = Some(fit);
    }
    Ok(VarianceGlm {
        psi: psi.clone(),
        fits,
        pooled: pooled_fit,
        empty_strata: empty,
        converged,
    })
}

impl VarianceGlm {
    pub fn predict(&self, s: u8, z: u8, x: &[f64]) -> f64 {
        let fit = self.fits[stratum_index(s, z)].as_ref().unwrap_or(&self.pooled);
        let phi = self.psi.eval(x);
        let eta: f64 = phi.iter().zip(fit.beta.iter()).map(|(a, b)| a * b).sum();
        eta.clamp(-ETA_CLAMP, ETA_CLAMP).exp()
    }
}

// ---------------------------------------------------------------------------
// Assembled nuisance models
// ---------------------------------------------------------------------------

/// How `m11` is produced.
#[derive(Debug, Clone)]
pub enum M11Rule {
    Direct { fit: Regressor, n_train: usize },
    /// Odds-ratio restriction: `l(m11) = l(m10) + l(m01) - l(m00)` exactly.
    LogitIdentity,
    /// Linear confounding restriction: `m11 = m10 + m01 - m00 + psi(x)'theta`.
    AdditiveIdentity { theta: Vec<f64>, psi: PsiSpec },
}

#[derive(Debug, Clone)]
pub enum VarianceRule {
    /// Binary outcomes: `V_sz = m_sz (1 - m_sz)`.
    FromBinaryMean,
    LogGlm(VarianceGlm),
    /// Downstream kernels that need V will see NaN and fail loudly.
    Unavailable,
}

/// Per-function fitted nuisances plus the restriction and variance rules.
#[derive(Debug, Clone)]
pub struct FittedNuisance {
    pub outcome: OutcomeKind,
    pub truncate: bool,
    pub p: (Regressor, usize),
    pub e: (Regressor, usize),
    pub q: (Regressor, usize),
    pub m10: (Regressor, usize),
    pub m01: (Regressor, usize),
    pub m00: (Regressor, usize),
    pub m11: M11Rule,
    pub variance: VarianceRule,
}

impl FittedNuisance {
    fn prob(&self, which: &(Regressor, usize), x: &[f64]) -> f64 {
        let raw = which.0.predict(x);
        if which.0.is_known() || !self.truncate {
            raw
        } else {
            truncate_probability(raw, which.1)
        }
    }

    fn mean(&self, which: &(Regressor, usize), x: &[f64]) -> f64 {
        let raw = which.0.predict(x);
        if which.0.is_known() || !self.truncate || self.outcome == OutcomeKind::Continuous {
            raw
        } else {
            truncate_probability(raw, which.1)
        }
    }

    pub fn m01_value(&self, x: &[f64]) -> f64 {
        self.mean(&self.m01, x)
    }

    pub fn m00_value(&self, x: &[f64]) -> f64 {
        self.mean(&self.m00, x)
    }

    pub fn at(&self, x: &[f64]) -> NuisanceAt {
        let p = self.prob(&self.p, x);
        let e = self.prob(&self.e, x);
        let q = self.prob(&self.q, x);
        let m10 = self.mean(&self.m10, x);
        let m01 = self.mean(&self.m01, x);
        let m00 = self.mean(&self.m00, x);
        let m11 = match &self.m11 {
            M11Rule::Direct { fit, n_train } => {
                let raw = fit.predict(x);
                if fit.is_known() || !self.truncate || self.outcome == OutcomeKind::Continuous {
                    raw
                } else {
                    truncate_probability(raw, *n_train)
                }
            }
            M11Rule::LogitIdentity => m5_identity(m10, m01, m00),
            M11Rule::AdditiveIdentity { theta, psi } => {
                let phi = psi.eval(x);
                let dot: f64 = phi.iter().zip(theta).map(|(a, b)| a * b).sum();
                m4_identity(m10, m01, m00, dot)
            }
        };
        let (v11, v10, v01, v00) = match &self.variance {
            VarianceRule::FromBinaryMean => (
                m11 * (1.0 - m11),
                m10 * (1.0 - m10),
                m01 * (1.0 - m01),
                m00 * (1.0 - m00),
            ),
            VarianceRule::LogGlm(glm) => (
                glm.predict(1, 1, x),
                glm.predict(1, 0, x),
                glm.predict(0, 1, x),
                glm.predict(0, 0, x),
            ),
            VarianceRule::Unavailable => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        NuisanceAt { p, e, q, m11, m10, m01, m00, v11, v10, v01, v00 }
    }
}

/// Enforce the odds-ratio restriction on a draft model: `m11` becomes the
/// logit identity of the three fitted means and variances switch to
/// `m(1-m)`.
pub fn enforce_m5(mut model: FittedNuisance) -> Result<FittedNuisance, NuisanceError> {
    if model.outcome != OutcomeKind::Binary {
        return Err(NuisanceError::NotBinaryOutcome);
    }
    model.m11 = M11Rule::LogitIdentity;
    model.variance = VarianceRule::FromBinaryMean;
    Ok(model)
}

/// Enforce the linear confounding restriction with coefficient `theta` on
/// basis `psi`.
pub fn enforce_m4(
    mut model: FittedNuisance,
    theta: Vec<f64>,
    psi: PsiSpec,
) -> Result<FittedNuisance, NuisanceError> {
    if theta.len() != psi.dim() {
        return Err(NuisanceError::DimensionMismatch { theta: theta.len(), psi: psi.dim() });
    }
    model.m11 = M11Rule::AdditiveIdentity { theta, psi };
    Ok(model)
}

/// Analytic nuisance functions supplied by a known data-generating process.
pub trait OracleFn: Send + Sync {
    fn at(&self, x: &[f64]) -> NuisanceAt;
}

#[derive(Clone)]
pub enum NuisanceEval {
    Fitted(FittedNuisance),
    Oracle(Arc<dyn OracleFn>),
}

impl fmt::Debug for NuisanceEval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NuisanceEval::Fitted(_) => write!(f, "Fitted"),
            NuisanceEval::Oracle(_) => write!(f, "Oracle"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ModelMeta {
    pub learner_kind: String,
    pub irls_converged: bool,
    pub ridge_fallback: bool,
    pub degenerate_cells: bool,
    pub variance_fallback: bool,
    /// Hash of the sorted training indices, for auditing fold discipline.
    pub training_hash: u64,
}

/// One nuisance model: an evaluation contract `x -> NuisanceAt`, the sample
/// share estimate `rho`, and the confounding coefficient when fitted.
#[derive(Debug, Clone)]
pub struct NuisanceModel {
    pub eval: NuisanceEval,
    pub rho: f64,
    pub theta: Option<Vec<f64>>,
    pub meta: ModelMeta,
}

impl NuisanceModel {
    pub fn at(&self, x: &[f64]) -> NuisanceAt {
        match &self.eval {
            NuisanceEval::Fitted(f) => f.at(x),
            NuisanceEval::Oracle(o) => o.at(x),
        }
    }

    pub fn from_oracle(oracle: Arc<dyn OracleFn>, rho: f64, theta: Option<Vec<f64>>) -> Self {
        NuisanceModel {
            eval: NuisanceEval::Oracle(oracle),
            rho,
            theta,
            meta: ModelMeta {
                learner_kind: "oracle".into(),
                irls_converged: true,
                ..Default::default()
            },
        }
    }
}

/// Which restriction a bundle's models satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestrictionKind {
    None,
    M4,
    M5,
}

/// K fold assignments plus K out-of-fold nuisance models; `models[k]` was
/// fitted only on observations outside fold k.
#[derive(Debug, Clone)]
pub struct CrossFitBundle {
    pub folds: FoldAssignment,
    pub models: Vec<NuisanceModel>,
    pub restriction: RestrictionKind,
    pub has_variance: bool,
}

impl CrossFitBundle {
    pub fn model_for_row(&self, i: usize) -> &NuisanceModel {
        &self.models[self.folds.fold_of(i)]
    }

    pub fn rho(&self) -> f64 {
        self.models[0].rho
    }

    /// Oracle bypass: K copies of the analytic model, so every downstream
    /// estimator computes its oracle variant.
    pub fn from_oracle(
        folds: FoldAssignment,
        model: NuisanceModel,
        restriction: RestrictionKind,
    ) -> Self {
        let k = folds.k();
        CrossFitBundle {
            folds,
            models: vec![model; k],
            restriction,
            has_variance: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Cross-fitting
// ---------------------------------------------------------------------------

/// Learner choice for a single nuisance function.
#[derive(Clone)]
pub enum LearnerSpec {
    CellMean,
    Irls { degree: usize },
    KnownConst(f64),
    KnownFn(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl fmt::Debug for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearnerSpec::CellMean => write!(f, "cell_mean"),
            LearnerSpec::Irls { degree } => write!(f, "irls:{degree}"),
            LearnerSpec::KnownConst(v) => write!(f, "known:{v}"),
            LearnerSpec::KnownFn(_) => write!(f, "known_fn"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum RestrictionSpec {
    None,
    M4 { psi: PsiSpec },
    M5,
}

#[derive(Debug, Clone)]
pub enum VarianceSpec {
    FromBinaryMean,
    LogGlm { psi: PsiSpec },
    None,
}

/// Full learner/restriction configuration for `cross_fit`.
#[derive(Debug, Clone)]
pub struct LearnedSpec {
    pub p: LearnerSpec,
    pub e: LearnerSpec,
    pub q: LearnerSpec,
    pub m10: LearnerSpec,
    pub m01: LearnerSpec,
    pub m00: LearnerSpec,
    pub m11: LearnerSpec,
    pub restriction: RestrictionSpec,
    pub variance: VarianceSpec,
    pub irls: IrlsOptions,
    /// Clamp fitted probabilities to the training-size band. On for
    /// estimation models; the control-variate refit turns it off.
    pub truncate: bool,
}

impl LearnedSpec {
    /// The same learners refit for the control-variate statistic: no
    /// restriction (an enforced restriction would make the odds-ratio
    /// discrepancy vanish identically) and no truncation (clipping the
    /// heavy-tailed odds ratios distorts the statistic's distribution).
    pub fn for_cv_refit(&self) -> LearnedSpec {
        let mut spec = self.clone();
        spec.restriction = RestrictionSpec::None;
        spec.truncate = false;
        spec
    }

    /// Cell means everywhere with the odds-ratio restriction; `e` known.
    pub fn discrete_default(e: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>) -> Self {
        LearnedSpec {
            p: LearnerSpec::CellMean,
            e: LearnerSpec::KnownFn(e),
            q: LearnerSpec::CellMean,
            m10: LearnerSpec::CellMean,
            m01: LearnerSpec::CellMean,
            m00: LearnerSpec::CellMean,
            m11: LearnerSpec::CellMean,
            restriction: RestrictionSpec::M5,
            variance: VarianceSpec::FromBinaryMean,
            irls: IrlsOptions::default(),
            truncate: true,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TargetKind {
    Probability,
    Mean,
}

struct FitFlags {
    irls_converged: bool,
    ridge: bool,
    degenerate: bool,
}

fn fit_one(
    data: &Dataset,
    spec: &LearnerSpec,
    subset: &[usize],
    global_subset: &[usize],
    target: &dyn Fn(&crate::dataset::FusedObservation) -> f64,
    kind: TargetKind,
    opts: IrlsOptions,
    flags: &mut FitFlags,
) -> Result<(Regressor, usize), NuisanceError> {
    match spec {
        LearnerSpec::KnownConst(v) => Ok((Regressor::KnownConst(*v), 0)),
        LearnerSpec::KnownFn(f) => Ok((Regressor::KnownFn(f.clone()), 0)),
        LearnerSpec::CellMean => {
            let use_subset = if subset.is_empty() {
                flags.degenerate = true;
                global_subset
            } else {
                subset
            };
            let fit = fit_cell_mean(
                use_subset
                    .iter()
                    .map(|&i| (&data.rows()[i].x[..], target(&data.rows()[i]))),
            )?;
            Ok((Regressor::CellMean(fit), use_subset.len()))
        }
        LearnerSpec::Irls { degree } => {
            let mut use_subset = subset;
            if subset.is_empty() {
                flags.degenerate = true;
                use_subset = global_subset;
            }
            if use_subset.is_empty() {
                // Nothing anywhere; fall back to an uninformative constant.
                flags.degenerate = true;
                let c = match kind {
                    TargetKind::Probability => 0.5,
                    TargetKind::Mean => {
                        if data.outcome_kind() == OutcomeKind::Binary {
                            0.5
                        } else {
                            0.0
                        }
                    }
                };
                return Ok((Regressor::KnownConst(c), 0));
            }
            let link = match kind {
                TargetKind::Probability => Link::Logit,
                TargetKind::Mean => {
                    if data.outcome_kind() == OutcomeKind::Binary {
                        Link::Logit
                    } else {
                        Link::Identity
                    }
                }
            };
            let features = PolyFeatures::new(data.d(), *degree);
            let xs: Vec<&[f64]> = use_subset.iter().map(|&i| &data.rows()[i].x[..]).collect();
            let ys: Vec<f64> = use_subset.iter().map(|&i| target(&data.rows()[i])).collect();
            let fit = fit_logistic_irls(&xs, &ys, &features, link, opts)?;
            flags.irls_converged &= fit.converged;
            flags.ridge |= fit.ridge_used;
            Ok((Regressor::Irls(fit), use_subset.len()))
        }
    }
}

fn training_hash(train: &[usize]) -> u64 {
    let mut sorted = train.to_vec();
    sorted.sort_unstable();
    let mut h = std::collections::hash_map::DefaultHasher::new();
    sorted.hash(&mut h);
    h.finish()
}

struct FoldPieces {
    train: Vec<usize>,
    fitted: FittedNuisance,
    flags: FitFlags,
}

fn fit_fold_means(
    data: &Dataset,
    train: Vec<usize>,
    spec: &LearnedSpec,
) -> Result<FoldPieces, NuisanceError> {
    let rows = data.rows();
    let mut flags = FitFlags { irls_converged: true, ridge: false, degenerate: false };

    let pick = |idx: &[usize], f: &dyn Fn(&crate::dataset::FusedObservation) -> bool| -> Vec<usize> {
        idx.iter().copied().filter(|&i| f(&rows[i])).collect()
    };
    let all: Vec<usize> = (0..data.n()).collect();

    let s1 = pick(&train, &|r| r.s == 1);
    let s0 = pick(&train, &|r| r.s == 0);
    let c11 = pick(&train, &|r| r.s == 1 && r.z == 1);
    let c10 = pick(&train, &|r| r.s == 1 && r.z == 0);
    let c01 = pick(&train, &|r| r.s == 0 && r.z == 1);
    let c00 = pick(&train, &|r| r.s == 0 && r.z == 0);
    let g_s1 = pick(&all, &|r| r.s == 1);
    let g_s0 = pick(&all, &|r| r.s == 0);
    let g11 = pick(&all, &|r| r.s == 1 && r.z == 1);
    let g10 = pick(&all, &|r| r.s == 1 && r.z == 0);
    let g01 = pick(&all, &|r| r.s == 0 && r.z == 1);
    let g00 = pick(&all, &|r| r.s == 0 && r.z == 0);

    let p = fit_one(data, &spec.p, &train, &all, &|r| r.s as f64, TargetKind::Probability, spec.irls, &mut flags)?;
    let e = fit_one(data, &spec.e, &s1, &g_s1, &|r| r.z as f64, TargetKind::Probability, spec.irls, &mut flags)?;
    let q = fit_one(data, &spec.q, &s0, &g_s0, &|r| r.z as f64, TargetKind::Probability, spec.irls, &mut flags)?;
    let m10 = fit_one(data, &spec.m10, &c10, &g10, &|r| r.y, TargetKind::Mean, spec.irls, &mut flags)?;
    let m01 = fit_one(data, &spec.m01, &c01, &g01, &|r| r.y, TargetKind::Mean, spec.irls, &mut flags)?;
    let m00 = fit_one(data, &spec.m00, &c00, &g00, &|r| r.y, TargetKind::Mean, spec.irls, &mut flags)?;
    let m11 = match spec.restriction {
        RestrictionSpec::None => {
            let fit = fit_one(data, &spec.m11, &c11, &g11, &|r| r.y, TargetKind::Mean, spec.irls, &mut flags)?;
            M11Rule::Direct { fit: fit.0, n_train: fit.1 }
        }
        // Placeholder; replaced once theta is available / restriction applied.
        _ => M11Rule::LogitIdentity,
    };

    let fitted = FittedNuisance {
        outcome: data.outcome_kind(),
        truncate: spec.truncate,
        p,
        e,
        q,
        m10,
        m01,
        m00,
        m11,
        variance: VarianceRule::Unavailable,
    };
    Ok(FoldPieces { train, fitted, flags })
}

fn spec_label(spec: &LearnedSpec) -> String {
    format!(
        "p={:?},e={:?},q={:?},m={:?}/{:?}/{:?}",
        spec.p, spec.e, spec.q, spec.m10, spec.m01, spec.m00
    )
}

fn validate_spec(data: &Dataset, spec: &LearnedSpec) -> Result<(), NuisanceError> {
    match &spec.restriction {
        RestrictionSpec::M5 => {
            if data.outcome_kind() != OutcomeKind::Binary {
                return Err(NuisanceError::NotBinaryOutcome);
            }
        }
        RestrictionSpec::M4 { psi } => {
            if !matches!(spec.e, LearnerSpec::KnownConst(_)) {
                return Err(NuisanceError::ConflictingSpec(
                    "the linear confounding restriction requires a known constant propensity (e = known:<value>)".into(),
                ));
            }
            if let Some(j) = psi.max_var() {
                if j >= data.d() {
                    return Err(NuisanceError::ConflictingSpec(format!(
                        "psi references x{} but the dataset has d={}",
                        j + 1,
                        data.d()
                    )));
                }
            }
        }
        RestrictionSpec::None => {}
    }
    match &spec.variance {
        VarianceSpec::FromBinaryMean => {
            if data.outcome_kind() != OutcomeKind::Binary {
                return Err(NuisanceError::NotBinaryOutcome);
            }
        }
        VarianceSpec::LogGlm { .. } => {
            if data.outcome_kind() != OutcomeKind::Continuous {
                return Err(NuisanceError::NotContinuousOutcome);
            }
        }
        VarianceSpec::None => {}
    }
    Ok(())
}

/// Cross-fit the nuisance models: K models, each trained out-of-fold,
/// truncated using its own training size, then restriction-enforced.
/// `rho` is the full-sample share of experimental rows.
pub fn cross_fit(
    data: &Dataset,
    folds: &FoldAssignment,
    spec: &LearnedSpec,
) -> Result<CrossFitBundle, NuisanceError> {
    assert_eq!(folds.len(), data.n());
    validate_spec(data, spec)?;
    let k = folds.k();

    let mut pieces = Vec::with_capacity(k);
    for fold in 0..k {
        let train = folds.indices_outside(fold);
        let piece = fit_fold_means(data, train, spec)
            .map_err(|e| NuisanceError::Fold { fold, source: Box::new(e) })?;
        pieces.push(piece);
    }

    // Confounding coefficient: fitted once, on out-of-fold m01/m00 values.
    let mut theta: Option<Vec<f64>> = None;
    if let RestrictionSpec::M4 { psi } = &spec.restriction {
        let e_star = match spec.e {
            LearnerSpec::KnownConst(v) => v,
            _ => unreachable!("validated above"),
        };
        let mut m01_hat = vec![0.0; data.n()];
        let mut m00_hat = vec![0.0; data.n()];
        for (i, row) in data.rows().iter().enumerate() {
            let piece = &pieces[folds.fold_of(i)];
            m01_hat[i] = piece.fitted.m01_value(&row.x);
            m00_hat[i] = piece.fitted.m00_value(&row.x);
        }
        theta = Some(theta_wls(data, &m01_hat, &m00_hat, psi, e_star)?);
    }

    // Apply the restriction to every fold's draft.
    for (fold, piece) in pieces.iter_mut().enumerate() {
        let draft = piece.fitted.clone();
        piece.fitted = match &spec.restriction {
            RestrictionSpec::None => draft,
            RestrictionSpec::M5 => enforce_m5(draft)
                .map_err(|e| NuisanceError::Fold { fold, source: Box::new(e) })?,
            RestrictionSpec::M4 { psi } => enforce_m4(
                draft,
                theta.clone().expect("theta fitted above"),
                psi.clone(),
            )
            .map_err(|e| NuisanceError::Fold { fold, source: Box::new(e) })?,
        };
    }

    // Variance models, trained out-of-fold on squared cross-fit residuals.
    let mut has_variance = true;
    match &spec.variance {
        VarianceSpec::FromBinaryMean => {
            for piece in pieces.iter_mut() {
                piece.fitted.variance = VarianceRule::FromBinaryMean;
            }
        }
        VarianceSpec::LogGlm { psi } => {
            let mut resid_sq = vec![0.0; data.n()];
            for (i, row) in data.rows().iter().enumerate() {
                let eta = pieces[folds.fold_of(i)].fitted.at(&row.x);
                let r = row.y - eta.m(row.s, row.z);
                resid_sq[i] = r * r;
            }
            for fold in 0..k {
                let glm = fit_variance_glm(data, &pieces[fold].train, &resid_sq, psi, spec.irls)
                    .map_err(|e| NuisanceError::Fold { fold, source: Box::new(e) })?;
                pieces[fold].flags.irls_converged &= glm.converged;
                if glm.empty_strata {
                    pieces[fold].flags.degenerate = true;
                }
                pieces[fold].fitted.variance = VarianceRule::LogGlm(glm);
            }
        }
        VarianceSpec::None => {
            has_variance = false;
        }
    }

    let rho = data.n_rct() as f64 / data.n() as f64;
    let label = spec_label(spec);
    let models = pieces
        .into_iter()
        .map(|piece| {
            let variance_fallback = match &piece.fitted.variance {
                VarianceRule::LogGlm(g) => g.empty_strata,
                _ => false,
            };
            NuisanceModel {
                eval: NuisanceEval::Fitted(piece.fitted),
                rho,
                theta: theta.clone(),
                meta: ModelMeta {
                    learner_kind: label.clone(),
                    irls_converged: piece.flags.irls_converged,
                    ridge_fallback: piece.flags.ridge,
                    degenerate_cells: piece.flags.degenerate,
                    variance_fallback,
                    training_hash: training_hash(&piece.train),
                },
            }
        })
        .collect();

    let restriction = match spec.restriction {
        RestrictionSpec::None => RestrictionKind::None,
        RestrictionSpec::M4 { .. } => RestrictionKind::M4,
        RestrictionSpec::M5 => RestrictionKind::M5,
    };
    Ok(CrossFitBundle {
        folds: folds.clone(),
        models,
        restriction,
        has_variance,
    })
}

/// Fit one model on the entire dataset (no cross-fitting). Used for the
/// control-variate refit and anywhere a plain plug-in fit is wanted.
pub fn fit_full(data: &Dataset, spec: &LearnedSpec) -> Result<NuisanceModel, NuisanceError> {
    validate_spec(data, spec)?;
    let all: Vec<usize> = (0..data.n()).collect();
    let mut piece = fit_fold_means(data, all, spec)?;

    let mut theta: Option<Vec<f64>> = None;
    if let RestrictionSpec::M4 { psi } = &spec.restriction {
        let e_star = match spec.e {
            LearnerSpec::KnownConst(v) => v,
            _ => unreachable!("validated above"),
        };
        let mut m01_hat = vec![0.0; data.n()];
        let mut m00_hat = vec![0.0; data.n()];
        for (i, row) in data.rows().iter().enumerate() {
            m01_hat[i] = piece.fitted.m01_value(&row.x);
            m00_hat[i] = piece.fitted.m00_value(&row.x);
        }
        theta = Some(theta_wls(data, &m01_hat, &m00_hat, psi, e_star)?);
    }

    piece.fitted = match &spec.restriction {
        RestrictionSpec::None => piece.fitted,
        RestrictionSpec::M5 => enforce_m5(piece.fitted)?,
        RestrictionSpec::M4 { psi } => {
            enforce_m4(piece.fitted, theta.clone().expect("theta fitted"), psi.clone())?
        }
    };

    match &spec.variance {
        VarianceSpec::FromBinaryMean => piece.fitted.variance = VarianceRule::FromBinaryMean,
        VarianceSpec::LogGlm { psi } => {
            let mut resid_sq = vec![0.0; data.n()];
            for (i, row) in data.rows().iter().enumerate() {
                let eta = piece.fitted.at(&row.x);
                let r = row.y - eta.m(row.s, row.z);
                resid_sq[i] = r * r;
            }
            let glm = fit_variance_glm(data, &piece.train, &resid_sq, psi, spec.irls)?;
            piece.fitted.variance = VarianceRule::LogGlm(glm);
        }
        VarianceSpec::None => {}
    }

    let rho = data.n_rct() as f64 / data.n() as f64;
    let variance_fallback = match &piece.fitted.variance {
        VarianceRule::LogGlm(g) => g.empty_strata,
        _ => false,
    };
    Ok(NuisanceModel {
        eval: NuisanceEval::Fitted(piece.fitted),
        rho,
        theta,
        meta: ModelMeta {
            learner_kind: format!("full:{}", spec_label(spec)),
            irls_converged: piece.flags.irls_converged,
            ridge_fallback: piece.flags.ridge,
            degenerate_cells: piece.flags.degenerate,
            variance_fallback,
            training_hash: training_hash(&piece.train),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_folds, FusedObservation};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(s: u8, z: u8, y: f64, x: Vec<f64>) -> FusedObservation {
        FusedObservation { s, z, y, x }
    }

    #[test]
    fn cell_mean_smoothing() {
        // 3 successes of 4 trials -> (3+1)/(4+2) = 2/3
        let xs = vec![vec![1.0, 0.0]; 4];
        let ys = [1.0, 1.0, 1.0, 0.0];
        let fit = fit_cell_mean(xs.iter().map(|x| (&x[..], 0.0)).zip(ys).map(|((x, _), y)| (x, y))).unwrap();
        assert!((fit.predict(&[1.0, 0.0]) - 2.0 / 3.0).abs() < 1e-15);
        // empty cell -> 1/2
        assert_eq!(fit.predict(&[0.0, 1.0]), 0.5);
    }

    #[test]
    fn cell_mean_rejects_non_discrete() {
        let x = [vec![0.5]];
        assert!(matches!(
            fit_cell_mean(x.iter().map(|x| (&x[..], 1.0))),
            Err(NuisanceError::NonDiscreteCovariates { .. })
        ));
    }

    #[test]
    fn truncation_examples() {
        assert!((truncate_probability(0.0001, 100) - 0.1).abs() < 1e-15);
        assert_eq!(truncate_probability(0.5, 977), 0.5);
        assert!((truncate_probability(1.2, 400) - 0.95).abs() < 1e-15);
        // degenerate band
        assert_eq!(truncate_probability(0.9, 3), 0.5);
    }

    #[test]
    fn irls_intercept_only_symmetry() {
        // two rows with identical x and y = 0, 1 -> fitted probability 1/2
        let xs: Vec<&[f64]> = vec![&[0.7], &[0.7]];
        let features = PolyFeatures::new(1, 1);
        let fit = fit_logistic_irls(&xs, &[0.0, 1.0], &features, Link::Logit, IrlsOptions::default()).unwrap();
        assert!((fit.predict(&[0.7]) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn irls_identity_matches_normal_equations() {
        // y = 2 + 3x fitted exactly
        let xs: Vec<&[f64]> = vec![&[0.0], &[1.0], &[2.0]];
        let ys = [2.0, 5.0, 8.0];
        let features = PolyFeatures::new(1, 1);
        let fit = fit_logistic_irls(&xs, &ys, &features, Link::Identity, IrlsOptions::default()).unwrap();
        let beta = fit.coefficients();
        assert!((beta[0] - 2.0).abs() < 1e-10);
        assert!((beta[1] - 3.0).abs() < 1e-10);
        assert!(fit.converged);
    }

    #[test]
    fn irls_separated_data_stays_finite() {
        let xs: Vec<&[f64]> = vec![&[-2.0], &[-1.0], &[1.0], &[2.0]];
        let ys = [0.0, 0.0, 1.0, 1.0];
        let features = PolyFeatures::new(1, 1);
        let fit = fit_logistic_irls(&xs, &ys, &features, Link::Logit, IrlsOptions::default()).unwrap();
        assert!(!fit.converged);
        assert!(fit.coefficients().iter().all(|b| b.is_finite()));
    }

    #[test]
    fn m5_identity_examples() {
        assert!((m5_identity(0.5, 0.5, 0.5) - 0.5).abs() < 1e-15);
        assert!((m5_identity(0.5, 0.9, 0.5) - 0.9).abs() < 1e-12);
        // odds 1.5 * (7/3) / (2/3) = 5.25 -> 5.25/6.25 = 0.84
        assert!((m5_identity(0.6, 0.7, 0.4) - 0.84).abs() < 1e-12);
    }

    #[test]
    fn m4_identity_examples() {
        assert_eq!(m4_identity(1.0, 2.0, 2.0, 0.0), 1.0);
        // theta = 0 -> m11 - m10 = m01 - m00
        let m11 = m4_identity(0.3, 0.8, 0.2, 0.0);
        assert!((m11 - 0.3 - (0.8 - 0.2)).abs() < 1e-15);
        // psi = (1, x1), theta = (1, -2), x1 = 0.5 -> psi'theta = 0
        let psi = PsiSpec::parse("intercept,x1").unwrap();
        let dot: f64 = psi.eval(&[0.5]).iter().zip(&[1.0, -2.0]).map(|(a, b)| a * b).sum();
        assert_eq!(dot, 0.0);
        assert_eq!(m4_identity(0.4, 0.6, 0.3, dot), 0.4 + 0.6 - 0.3);
    }

    #[test]
    fn enforcement_identities_random_drafts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let m10 = rng.random_range(0.02..0.98);
            let m01 = rng.random_range(0.02..0.98);
            let m00 = rng.random_range(0.02..0.98);
            let m11 = m5_identity(m10, m01, m00);
            assert!(
                (logit(m11) - logit(m10) - logit(m01) + logit(m00)).abs() < 1e-12,
                "logit identity violated"
            );

            let dot = rng.random_range(-2.0..2.0);
            let a11 = m4_identity(m10, m01, m00, dot);
            assert!((a11 - m10 - m01 + m00 - dot).abs() < 1e-12);
        }
    }

    #[test]
    fn theta_wls_examples() {
        let psi = PsiSpec::parse("intercept").unwrap();
        // target identically zero: y = 0, m01 = m00
        let data = Dataset::new(
            vec![obs(1, 1, 0.0, vec![0.0]), obs(1, 0, 0.0, vec![1.0]), obs(0, 1, 1.0, vec![0.0])],
            OutcomeKind::Continuous,
        )
        .unwrap();
        let theta = theta_wls(&data, &[0.3, 0.3, 0.3], &[0.3, 0.3, 0.3], &psi, 0.5).unwrap();
        assert!(theta[0].abs() < 1e-12);

        // intercept-only: theta = mean of targets over RCT rows
        // row0: y=1,z=1 -> 1/0.5 - (0.7-0.5) = 1.8 ; row1: y=1,z=0 -> -2 - 0.2 = -2.2
        let data = Dataset::new(
            vec![obs(1, 1, 1.0, vec![0.0]), obs(1, 0, 1.0, vec![1.0])],
            OutcomeKind::Continuous,
        )
        .unwrap();
        let theta = theta_wls(&data, &[0.7, 0.7], &[0.5, 0.5], &psi, 0.5).unwrap();
        assert!((theta[0] - (1.8 + (-2.2)) / 2.0).abs() < 1e-12);

        // two RCT rows with psi = (1, x1): exact interpolation of the targets
        let psi2 = PsiSpec::parse("intercept,x1").unwrap();
        let theta = theta_wls(&data, &[0.7, 0.7], &[0.5, 0.5], &psi2, 0.5).unwrap();
        assert!((theta[0] - 1.8).abs() < 1e-10);
        assert!((theta[1] - (-4.0)).abs() < 1e-10);
    }

    #[test]
    fn theta_wls_requires_rct_rows() {
        let psi = PsiSpec::parse("intercept").unwrap();
        let data = Dataset::new(vec![obs(0, 1, 1.0, vec![0.0])], OutcomeKind::Continuous).unwrap();
        assert!(matches!(
            theta_wls(&data, &[0.0], &[0.0], &psi, 0.5),
            Err(NuisanceError::NoRctRows)
        ));
    }

    #[test]
    fn variance_glm_saturated_and_exact() {
        // constant residuals c in a stratum with intercept-only features -> V == c
        let rows = vec![
            obs(1, 1, 0.0, vec![0.0]),
            obs(1, 1, 0.0, vec![1.0]),
            obs(1, 0, 0.0, vec![0.0]),
            obs(0, 1, 0.0, vec![0.0]),
            obs(0, 0, 0.0, vec![0.0]),
        ];
        let data = Dataset::new(rows, OutcomeKind::Continuous).unwrap();
        let psi = PsiSpec::parse("intercept").unwrap();
        let train: Vec<usize> = (0..5).collect();
        let glm = fit_variance_glm(&data, &train, &[3.0, 3.0, 3.0, 3.0, 3.0], &psi, IrlsOptions::default()).unwrap();
        assert!((glm.predict(1, 1, &[0.5]) - 3.0).abs() < 1e-8);

        // residuals {1,4} at two x under intercept+slope -> exact 2-parameter fit
        let rows = vec![obs(1, 1, 0.0, vec![0.0]), obs(1, 1, 0.0, vec![1.0])];
        let data = Dataset::new(rows, OutcomeKind::Continuous).unwrap();
        let psi = PsiSpec::parse("intercept,x1").unwrap();
        let glm = fit_variance_glm(&data, &[0, 1], &[1.0, 4.0], &psi, IrlsOptions { max_iter: 100, tol: 1e-12 }).unwrap();
        assert!((glm.predict(1, 1, &[0.0]) - 1.0).abs() < 1e-6);
        assert!((glm.predict(1, 1, &[1.0]) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn variance_glm_rejects_binary_outcome() {
        let data = Dataset::new(vec![obs(1, 1, 1.0, vec![0.0])], OutcomeKind::Binary).unwrap();
        let psi = PsiSpec::parse("intercept").unwrap();
        assert!(matches!(
            fit_variance_glm(&data, &[0], &[0.1], &psi, IrlsOptions::default()),
            Err(NuisanceError::NotContinuousOutcome)
        ));
    }

    #[test]
    fn variance_glm_pooled_fallback_on_empty_stratum() {
        // no (0,1) rows at all
        let rows = vec![
            obs(1, 1, 0.0, vec![0.0]),
            obs(1, 0, 0.0, vec![0.0]),
            obs(0, 0, 0.0, vec![0.0]),
        ];
        let data = Dataset::new(rows, OutcomeKind::Continuous).unwrap();
        let psi = PsiSpec::parse("intercept").unwrap();
        let glm = fit_variance_glm(&data, &[0, 1, 2], &[2.0, 2.0, 2.0], &psi, IrlsOptions::default()).unwrap();
        assert!(glm.empty_strata);
        assert!((glm.predict(0, 1, &[0.0]) - 2.0).abs() < 1e-8);
    }

    fn tiny_discrete_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<FusedObservation> = (0..n)
            .map(|i| {
                let x = vec![rng.random_range(0..2) as f64, rng.random_range(0..2) as f64];
                let s = if i < n / 2 { 1 } else { 0 };
                let z = rng.random_range(0..2) as u8;
                let y = rng.random_range(0..2) as f64;
                obs(s, z, y, x)
            })
            .collect();
        Dataset::new(rows, OutcomeKind::Binary).unwrap()
    }

    #[test]
    fn cross_fit_complementary_halves_and_known_e() {
        let data = tiny_discrete_dataset(64, 5);
        let folds = make_folds(data.n(), 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let spec = LearnedSpec::discrete_default(Arc::new(|_x: &[f64]| 0.5));
        let bundle = cross_fit(&data, &folds, &spec).unwrap();
        assert_eq!(bundle.models.len(), 2);
        assert_ne!(bundle.models[0].meta.training_hash, bundle.models[1].meta.training_hash);
        // known-constant e path is untruncated
        let at = bundle.models[0].at(&[1.0, 0.0]);
        assert_eq!(at.e, 0.5);
        // enforce_m5 postcondition at all 4 cells, both folds
        for model in &bundle.models {
            for x1 in [0.0, 1.0] {
                for x2 in [0.0, 1.0] {
                    let eta = model.at(&[x1, x2]);
                    let gap = logit(eta.m11) - logit(eta.m10) - logit(eta.m01) + logit(eta.m00);
                    assert!(gap.abs() < 1e-12, "logit identity violated: {gap}");
                    assert!((eta.v11 - eta.m11 * (1.0 - eta.m11)).abs() < 1e-15);
                }
            }
        }
        // training-index audit: recompute hash from the fold assignment
        for k in 0..2 {
            let mut idx = folds.indices_outside(k);
            idx.sort_unstable();
            assert_eq!(bundle.models[k].meta.training_hash, super::training_hash(&idx));
        }
    }

    #[test]
    fn cross_fit_row_order_invariance() {
        // Shuffling row order (with folds tracking the same membership) gives
        // identical cell tables, hence identical predictions.
        let data = tiny_discrete_dataset(40, 9);
        let folds = make_folds(data.n(), 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let spec = LearnedSpec::discrete_default(Arc::new(|_x: &[f64]| 0.5));
        let bundle = cross_fit(&data, &folds, &spec).unwrap();

        let mut perm: Vec<usize> = (0..data.n()).collect();
        perm.reverse();
        let rows2: Vec<FusedObservation> = perm.iter().map(|&i| data.rows()[i].clone()).collect();
        let data2 = Dataset::new(rows2, OutcomeKind::Binary).unwrap();
        // fold assignment carrying the same membership under the permutation
        let fold_of2: Vec<usize> = perm.iter().map(|&i| folds.fold_of(i)).collect();
        let folds2 = FoldAssignment::from_parts(fold_of2, 2);
        let bundle2 = cross_fit(&data2, &folds2, &spec).unwrap();
        for x1 in [0.0, 1.0] {
            for x2 in [0.0, 1.0] {
                let a = bundle.models[0].at(&[x1, x2]);
                let b = bundle2.models[0].at(&[x1, x2]);
                assert_eq!(a.p.to_bits(), b.p.to_bits());
                assert_eq!(a.m11.to_bits(), b.m11.to_bits());
            }
        }
    }

    #[test]
    fn cross_fit_m4_theta_recovers_linear_confounding() {
        // Noiseless data where m11-m10-m01+m00 = 0.4 - 0.2 x1. Both
        // treatment arms are present at every covariate point so the
        // inverse-propensity-weighted contrast averages out exactly.
        let mut rows = Vec::new();
        for i in 0..100 {
            let x1 = i as f64 / 99.0;
            let m10 = 1.0 + x1;
            let m00 = 0.5 + 0.2 * x1;
            let m01 = m00 + 0.3;
            let theta_true = 0.4 - 0.2 * x1;
            let m11 = m10 + m01 - m00 + theta_true;
            rows.push(obs(1, 1, m11, vec![x1]));
            rows.push(obs(1, 0, m10, vec![x1]));
            rows.push(obs(0, 1, m01, vec![x1]));
            rows.push(obs(0, 0, m00, vec![x1]));
        }
        let data = Dataset::new(rows, OutcomeKind::Continuous).unwrap();
        let folds = make_folds(data.n(), 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let psi = PsiSpec::parse("intercept,x1").unwrap();
        let spec = LearnedSpec {
            p: LearnerSpec::KnownConst(0.5),
            e: LearnerSpec::KnownConst(0.5),
            q: LearnerSpec::KnownConst(0.5),
            m10: LearnerSpec::Irls { degree: 1 },
            m01: LearnerSpec::Irls { degree: 1 },
            m00: LearnerSpec::Irls { degree: 1 },
            m11: LearnerSpec::Irls { degree: 1 },
            restriction: RestrictionSpec::M4 { psi: psi.clone() },
            variance: VarianceSpec::None,
            irls: IrlsOptions::default(),
            truncate: true,
        };
        let bundle = cross_fit(&data, &folds, &spec).unwrap();
        let theta = bundle.models[0].theta.clone().unwrap();
        assert!((theta[0] - 0.4).abs() < 1e-6, "theta0 = {}", theta[0]);
        assert!((theta[1] + 0.2).abs() < 1e-6, "theta1 = {}", theta[1]);
        // additive identity holds exactly at probe points
        for model in &bundle.models {
            for x1 in [0.1, 0.5, 0.9] {
                let eta = model.at(&[x1]);
                let dot = theta[0] + theta[1] * x1;
                assert!((eta.m11 - eta.m10 - eta.m01 + eta.m00 - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn poly_features_dims() {
        let f = PolyFeatures::new(2, 2);
        // 1, x2, x2^2, x1, x1 x2, x1^2
        assert_eq!(f.dim(), 6);
        let vals = f.eval(&[2.0, 3.0]);
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(sorted, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn psi_parse_and_display() {
        let psi = PsiSpec::parse("intercept, x1, x2, x1*x2").unwrap();
        assert_eq!(psi.dim(), 4);
        assert_eq!(psi.eval(&[2.0, 5.0]), vec![1.0, 2.0, 5.0, 10.0]);
        assert_eq!(psi.to_string(), "intercept,x1,x2,x1*x2");
        assert!(PsiSpec::parse("x0").is_err());
        assert!(PsiSpec::parse("foo").is_err());
    }
}
