//! Baseline augmented inverse propensity (of sampling) weighted estimators,
//! the efficient one-step estimators under the two outcome-mean restrictions,
//! and the control-variate comparator.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::dataset::{Dataset, OutcomeKind};
use crate::influence::{
    delta, f_selection, h_confounding, lambda_solve, nu_confounding, phi0, zeta_selection,
    EstimandKind, KernelContext, KernelError, LambdaPoint,
};
use crate::linalg::solve_sym_ridge;
use crate::nuisance::{logit, CrossFitBundle, NuisanceAt, NuisanceModel, PsiSpec, RestrictionKind};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("no experimental (s=1) rows: the {0} estimand is undefined")]
    NoRctRows(EstimandKind),
    #[error("no observational (s=0) rows: the {0} estimand is undefined")]
    NoObsRows(EstimandKind),
    #[error("bundle restriction is {found:?}, but this estimator requires {required:?}")]
    RestrictionMismatch {
        required: RestrictionKind,
        found: RestrictionKind,
    },
    #[error("estimator requires a binary outcome model")]
    NotBinaryOutcome,
    #[error("bundle carries no variance model")]
    NoVarianceModel,
    #[error("control variate adjustment needs a gamma of dimension {lambda}, got {gamma}")]
    MissingGamma { lambda: usize, gamma: usize },
    #[error("covariance of the control variates is singular")]
    SingularCovariance,
    #[error("need at least two replicates to estimate gamma, got {0}")]
    TooFewReplicates(usize),
    #[error("control variates over covariate cells require at most 16 binary covariates, got d={0}")]
    TooManyCells(usize),
    #[error("row {row}: {source}")]
    Kernel {
        row: usize,
        #[source]
        source: KernelError,
    },
    #[error(transparent)]
    Context(#[from] KernelError),
}

/// Which estimator produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Baseline,
    EffM4,
    EffM5,
    ControlVariate,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::EffM4 => "eff_m4",
            Method::EffM5 => "eff_m5",
            Method::ControlVariate => "cv",
        }
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        match text.trim().to_ascii_lowercase().as_str() {
            "baseline" | "ba" => Ok(Method::Baseline),
            "eff_m4" => Ok(Method::EffM4),
            "eff_m5" => Ok(Method::EffM5),
            "cv" | "control_variate" => Ok(Method::ControlVariate),
            other => Err(format!(
                "unknown method `{other}` (expected baseline, eff_m4, eff_m5, or cv)"
            )),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Estimator diagnostics aggregated from the nuisance bundle.
#[derive(Debug, Clone, Copy, Default)]
pub struct Diagnostics {
    pub irls_all_converged: bool,
    pub ridge_fallback: bool,
    pub degenerate_cells: bool,
    pub variance_fallback: bool,
    pub dropped_cv_cells: usize,
}

impl Diagnostics {
    fn from_bundle(bundle: &CrossFitBundle) -> Self {
        Diagnostics {
            irls_all_converged: bundle.models.iter().all(|m| m.meta.irls_converged),
            ridge_fallback: bundle.models.iter().any(|m| m.meta.ridge_fallback),
            degenerate_cells: bundle.models.iter().any(|m| m.meta.degenerate_cells),
            variance_fallback: bundle.models.iter().any(|m| m.meta.variance_fallback),
            dropped_cv_cells: 0,
        }
    }
}

/// A point estimate with its one-step bookkeeping. For one-step methods,
/// `tau_hat` is exactly `tau_baseline - adjustment`.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub kind: EstimandKind,
    pub method: Method,
    pub tau_hat: f64,
    pub adjustment: f64,
    pub tau_baseline: f64,
    pub per_obs: Option<Vec<f64>>,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    /// The one-step arithmetic identity, checked bitwise.
    pub fn one_step_identity_holds(&self) -> bool {
        (self.tau_baseline - self.adjustment).to_bits() == self.tau_hat.to_bits()
    }
}

fn eval_rows(data: &Dataset, bundle: &CrossFitBundle) -> Vec<NuisanceAt> {
    data.rows()
        .iter()
        .enumerate()
        .map(|(i, row)| bundle.model_for_row(i).at(&row.x))
        .collect()
}

fn kernel_at(row: usize) -> impl Fn(KernelError) -> EstimatorError {
    move |source| EstimatorError::Kernel { row, source }
}

/// Cross-fit AIP(S)W estimator: solves the empirical estimating equation of
/// the canonical gradient, which is affine in tau, so the solution is in
/// closed form with out-of-fold nuisances per row.
pub fn fit_baseline(
    data: &Dataset,
    bundle: &CrossFitBundle,
    kind: EstimandKind,
) -> Result<EstimateReport, EstimatorError> {
    let etas = eval_rows(data, bundle);
    fit_baseline_with(data, bundle, kind, &etas)
}

fn fit_baseline_with(
    data: &Dataset,
    bundle: &CrossFitBundle,
    kind: EstimandKind,
    etas: &[NuisanceAt],
) -> Result<EstimateReport, EstimatorError> {
    let n_rct = data.n_rct();
    let n_obs = data.n_obs();
    if n_rct == 0 {
        return Err(EstimatorError::NoRctRows(kind));
    }
    if kind != EstimandKind::Rct && n_obs == 0 {
        return Err(EstimatorError::NoObsRows(kind));
    }

    let tau_hat = match kind {
        EstimandKind::Rct => {
            let mut num = 0.0;
            for (i, row) in data.rows().iter().enumerate() {
                if row.s != 1 {
                    continue;
                }
                let eta = &etas[i];
                let d = delta(row.z, row.y, eta).map_err(kernel_at(i))?;
                num += d + eta.m11 - eta.m10;
            }
            num / n_rct as f64
        }
        EstimandKind::Obs => {
            let mut num = 0.0;
            for (i, row) in data.rows().iter().enumerate() {
                let eta = &etas[i];
                if row.s == 1 {
                    check_p(eta.p, i)?;
                    let d = delta(row.z, row.y, eta).map_err(kernel_at(i))?;
                    num += (1.0 - eta.p) / eta.p * d;
                } else {
                    num += eta.m11 - eta.m10;
                }
            }
            num / n_obs as f64
        }
        EstimandKind::Tgt => {
            let mut num = 0.0;
            for (i, row) in data.rows().iter().enumerate() {
                let eta = &etas[i];
                if row.s == 1 {
                    check_p(eta.p, i)?;
                    let d = delta(row.z, row.y, eta).map_err(kernel_at(i))?;
                    num += d / eta.p;
                }
                num += eta.m11 - eta.m10;
            }
            num / data.n() as f64
        }
    };

    let ctx = KernelContext::new(kind, tau_hat, bundle.rho())?;
    let mut per_obs = Vec::with_capacity(data.n());
    for (i, row) in data.rows().iter().enumerate() {
        per_obs.push(phi0(row.s, row.z, row.y, &etas[i], &ctx).map_err(kernel_at(i))?);
    }

    Ok(EstimateReport {
        kind,
        method: Method::Baseline,
        tau_hat,
        adjustment: 0.0,
        tau_baseline: tau_hat,
        per_obs: Some(per_obs),
        diagnostics: Diagnostics::from_bundle(bundle),
    })
}

fn check_p(p: f64, row: usize) -> Result<(), EstimatorError> {
    if !(p > crate::influence::PROB_EPS && p < 1.0 - crate::influence::PROB_EPS) {
        return Err(EstimatorError::Kernel {
            row,
            source: KernelError::DegenerateSelection { value: p },
        });
    }
    Ok(())
}

/// Efficient one-step estimator under the linear confounding restriction.
/// The multiplier vector is solved once per fold from that fold's model
/// evaluated over every row's covariates.
pub fn one_step_m4(
    data: &Dataset,
    bundle: &CrossFitBundle,
    kind: EstimandKind,
    psi: &PsiSpec,
) -> Result<EstimateReport, EstimatorError> {
    if bundle.restriction != RestrictionKind::M4 {
        return Err(EstimatorError::RestrictionMismatch {
            required: RestrictionKind::M4,
            found: bundle.restriction,
        });
    }
    if !bundle.has_variance {
        return Err(EstimatorError::NoVarianceModel);
    }
    one_step(data, bundle, kind, Method::EffM4, Some(psi))
}

/// Efficient one-step estimator under the outcome-mediated selection
/// restriction (binary outcomes).
pub fn one_step_m5(
    data: &Dataset,
    bundle: &CrossFitBundle,
    kind: EstimandKind,
) -> Result<EstimateReport, EstimatorError> {
    if bundle.restriction != RestrictionKind::M5 {
        return Err(EstimatorError::RestrictionMismatch {
            required: RestrictionKind::M5,
            found: bundle.restriction,
        });
    }
    if data.outcome_kind() != OutcomeKind::Binary {
        return Err(EstimatorError::NotBinaryOutcome);
    }
    one_step(data, bundle, kind, Method::EffM5, None)
}

fn one_step(
    data: &Dataset,
    bundle: &CrossFitBundle,
    kind: EstimandKind,
    method: Method,
    psi: Option<&PsiSpec>,
) -> Result<EstimateReport, EstimatorError> {
    let etas = eval_rows(data, bundle);
    let baseline = fit_baseline_with(data, bundle, kind, &etas)?;
    let ctx = KernelContext::new(kind, baseline.tau_baseline, bundle.rho())?;

    let n = data.n() as f64;
    let k = bundle.folds.k();
    let mut g = vec![0.0f64; data.n()];

    match method {
        Method::EffM4 => {
            let psi = psi.expect("eff_m4 requires a basis");
            let psi_rows: Vec<Vec<f64>> = data.rows().iter().map(|r| psi.eval(&r.x)).collect();
            for fold in 0..k {
                // multiplier from this fold's model over all rows' covariates
                let model = &bundle.models[fold];
                let points: Vec<LambdaPoint> = data
                    .rows()
                    .iter()
                    .enumerate()
                    .map(|(i, row)| LambdaPoint {
                        eta: model.at(&row.x),
                        psi: psi_rows[i].clone(),
                        weight: 1.0,
                    })
                    .collect();
                let lambda = lambda_solve(&points, &ctx)?;
                for (i, row) in data.rows().iter().enumerate() {
                    if bundle.folds.fold_of(i) != fold {
                        continue;
                    }
                    let eta = &etas[i];
                    let h = h_confounding(row.s, row.z, eta).map_err(kernel_at(i))?;
                    let nu = nu_confounding(eta, &ctx, &lambda, &psi_rows[i]).map_err(kernel_at(i))?;
                    g[i] = h * nu * (row.y - eta.m(row.s, row.z));
                }
            }
        }
        Method::EffM5 => {
            for (i, row) in data.rows().iter().enumerate() {
                let eta = &etas[i];
                let f = f_selection(row.s, row.z, eta).map_err(kernel_at(i))?;
                let zeta = zeta_selection(eta, &ctx).map_err(kernel_at(i))?;
                g[i] = f * zeta * (row.y - eta.m(row.s, row.z));
            }
        }
        _ => unreachable!(),
    }

    let adjustment: f64 = g.iter().sum::<f64>() / n;
    let tau_hat = baseline.tau_baseline - adjustment;
    let per_obs = baseline
        .per_obs
        .as_ref()
        .map(|phi| phi.iter().zip(&g).map(|(a, b)| a - b).collect());

    Ok(EstimateReport {
        kind,
        method,
        tau_hat,
        adjustment,
        tau_baseline: baseline.tau_baseline,
        per_obs,
        diagnostics: baseline.diagnostics,
    })
}

/// How the control variates probe the fitted odds ratios.
#[derive(Debug, Clone)]
pub enum CvProbes {
    /// One control variate `OR1(x) - OR0(x)` per covariate cell of a binary
    /// covariate space. Cells absent from the data contribute zero and are
    /// flagged, keeping the vector dimension stable across replicates.
    DiscreteCells,
    /// A single control variate: the average of `log OR1 - log OR0` over
    /// `count` random distinct covariate rows of the combined dataset.
    ContinuousSample { count: usize },
}

/// A realized control-variate statistic.
#[derive(Debug, Clone)]
pub struct CvStatistic {
    pub lambda: Vec<f64>,
    pub dropped_cells: usize,
}

/// Evaluate the control variates from a full-sample (non-cross-fit) refit of
/// the outcome mean functions.
pub fn cv_statistic(
    data: &Dataset,
    full_fit: &NuisanceModel,
    probes: &CvProbes,
    rng: &mut impl Rng,
) -> Result<CvStatistic, EstimatorError> {
    match probes {
        CvProbes::DiscreteCells => {
            let d = data.d();
            if d > 16 {
                return Err(EstimatorError::TooManyCells(d));
            }
            let mut present = std::collections::HashSet::new();
            for row in data.rows() {
                let mut key = 0usize;
                for (j, &v) in row.x.iter().enumerate() {
                    if v == 1.0 {
                        key |= 1 << j;
                    }
                }
                present.insert(key);
            }
            let mut lambda = Vec::with_capacity(1 << d);
            let mut dropped = 0usize;
            for key in 0..(1usize << d) {
                let x: Vec<f64> = (0..d).map(|j| ((key >> j) & 1) as f64).collect();
                if !present.contains(&key) {
                    lambda.push(0.0);
                    dropped += 1;
                    continue;
                }
                let eta = full_fit.at(&x);
                let or1 = odds(eta.m11) / odds(eta.m10);
                let or0 = odds(eta.m01) / odds(eta.m00);
                lambda.push(or1 - or0);
            }
            Ok(CvStatistic { lambda, dropped_cells: dropped })
        }
        CvProbes::ContinuousSample { count } => {
            // distinct covariate rows by full-vector equality, in first-appearance order
            let mut seen = std::collections::HashSet::new();
            let mut distinct: Vec<&[f64]> = Vec::new();
            for row in data.rows() {
                let key: Vec<u64> = row.x.iter().map(|v| v.to_bits()).collect();
                if seen.insert(key) {
                    distinct.push(&row.x);
                }
            }
            distinct.shuffle(rng);
            let take = (*count).min(distinct.len());
            let mut sum = 0.0;
            for x in distinct.iter().take(take) {
                let eta = full_fit.at(x);
                sum += logit(eta.m11) - logit(eta.m10) - (logit(eta.m01) - logit(eta.m00));
            }
            Ok(CvStatistic {
                lambda: vec![sum / take as f64],
                dropped_cells: 0,
            })
        }
    }
}

fn odds(m: f64) -> f64 {
    m / (1.0 - m)
}

/// Control-variate estimator: the baseline estimate linearly adjusted by the
/// odds-ratio discrepancy statistics with a pre-estimated factor `gamma`
/// (see [`estimate_gamma`]).
pub fn control_variate(
    data: &Dataset,
    bundle: &CrossFitBundle,
    kind: EstimandKind,
    full_fit: &NuisanceModel,
    probes: &CvProbes,
    gamma: &[f64],
    rng: &mut impl Rng,
) -> Result<EstimateReport, EstimatorError> {
    let baseline = fit_baseline(data, bundle, kind)?;
    let stat = cv_statistic(data, full_fit, probes, rng)?;
    apply_control_variate(&baseline, &stat, gamma)
}

/// Apply a precomputed adjustment factor to a baseline report.
pub fn apply_control_variate(
    baseline: &EstimateReport,
    stat: &CvStatistic,
    gamma: &[f64],
) -> Result<EstimateReport, EstimatorError> {
    if gamma.len() != stat.lambda.len() {
        return Err(EstimatorError::MissingGamma {
            lambda: stat.lambda.len(),
            gamma: gamma.len(),
        });
    }
    let adjustment: f64 = gamma.iter().zip(&stat.lambda).map(|(g, l)| g * l).sum();
    let mut diagnostics = baseline.diagnostics;
    diagnostics.dropped_cv_cells = stat.dropped_cells;
    Ok(EstimateReport {
        kind: baseline.kind,
        method: Method::ControlVariate,
        tau_hat: baseline.tau_hat - adjustment,
        adjustment,
        tau_baseline: baseline.tau_hat,
        per_obs: None,
        diagnostics,
    })
}

/// Covariance-optimal adjustment factor from replicate pairs of the baseline
/// estimate and the control-variate vector:
/// `gamma = cov(lambda)^{-1} cov(lambda, tau_ba)` as a row vector.
pub fn estimate_gamma(pairs: &[(f64, Vec<f64>)]) -> Result<Vec<f64>, EstimatorError> {
    let n = pairs.len();
    if n < 2 {
        return Err(EstimatorError::TooFewReplicates(n));
    }
    let q = pairs[0].1.len();
    let mean_tau = pairs.iter().map(|(t, _)| t).sum::<f64>() / n as f64;
    let mut mean_l = vec![0.0; q];
    for (_, l) in pairs {
        for (a, v) in mean_l.iter_mut().zip(l) {
            *a += v;
        }
    }
    for a in mean_l.iter_mut() {
        *a /= n as f64;
    }

    let mut cov_ll = DMatrix::zeros(q, q);
    let mut cov_lt = DVector::zeros(q);
    for (t, l) in pairs {
        let dt = t - mean_tau;
        for a in 0..q {
            let da = l[a] - mean_l[a];
            cov_lt[a] += da * dt;
            for b in a..q {
                cov_ll[(a, b)] += da * (l[b] - mean_l[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    cov_lt /= denom;
    cov_ll /= denom;
    for a in 0..q {
        for b in 0..a {
            cov_ll[(a, b)] = cov_ll[(b, a)];
        }
    }
    let (gamma, _) = solve_sym_ridge(&cov_ll, &cov_lt).map_err(|_| EstimatorError::SingularCovariance)?;
    Ok(gamma.iter().copied().collect())
}
