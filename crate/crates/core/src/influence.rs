//! Pure evaluation of the influence-function kernels: the inverse propensity
//! weighted difference, the canonical gradients of the three estimands, and
//! the adjustment kernels of the linear-confounding and outcome-mediated
//! selection restrictions.
//!
//! Every function here is a pure map from its arguments; identical inputs
//! give bitwise-identical outputs.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::solve_sym_ridge;
use crate::nuisance::{logit_deriv, NuisanceAt};

/// Probabilities within this distance of {0,1} are treated as degenerate.
pub const PROB_EPS: f64 = 1e-12;

/// Relative threshold below which a confounding-adjustment residual is a
/// numerical zero. Keeps round-off from the Gram solve out of the one-step
/// adjustment when the projection is exactly absorbed (constant conditional
/// moment with an intercept in the basis).
const NU_ZERO_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("propensity {value} is degenerate (within {PROB_EPS:e} of 0 or 1)")]
    DegeneratePropensity { value: f64 },
    #[error("selection probability {value} is degenerate")]
    DegenerateSelection { value: f64 },
    #[error("rho {value} must lie strictly inside (0,1)")]
    DegenerateRho { value: f64 },
    #[error("outcome mean {value} lies on the boundary of (0,1)")]
    MeanOnBoundary { value: f64 },
    #[error("conditional variance aggregate is zero")]
    ZeroSigma,
    #[error("selection information aggregate is zero")]
    ZeroD,
    #[error("empirical Gram matrix is singular")]
    SingularGram,
}

/// Which average treatment effect is targeted: over the experimental
/// covariate law, the observational one, or the combined one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimandKind {
    Rct,
    Obs,
    Tgt,
}

impl EstimandKind {
    pub const ALL: [EstimandKind; 3] = [EstimandKind::Rct, EstimandKind::Obs, EstimandKind::Tgt];

    pub fn label(self) -> &'static str {
        match self {
            EstimandKind::Rct => "rct",
            EstimandKind::Obs => "obs",
            EstimandKind::Tgt => "tgt",
        }
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        match text.trim().to_ascii_lowercase().as_str() {
            "rct" => Ok(EstimandKind::Rct),
            "obs" => Ok(EstimandKind::Obs),
            "tgt" => Ok(EstimandKind::Tgt),
            other => Err(format!("unknown estimand kind `{other}` (expected rct, obs, or tgt)")),
        }
    }
}

impl std::fmt::Display for EstimandKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Evaluation context shared by the kernels: the estimand, the current
/// estimand value plugged into the centered gradients, and the sample-share
/// estimate rho.
#[derive(Debug, Clone, Copy)]
pub struct KernelContext {
    pub kind: EstimandKind,
    pub tau: f64,
    pub rho: f64,
}

impl KernelContext {
    pub fn new(kind: EstimandKind, tau: f64, rho: f64) -> Result<Self, KernelError> {
        if !(rho > 0.0 && rho < 1.0) || !rho.is_finite() {
            return Err(KernelError::DegenerateRho { value: rho });
        }
        Ok(KernelContext { kind, tau, rho })
    }
}

fn check_propensity(v: f64) -> Result<f64, KernelError> {
    if !(v > PROB_EPS && v < 1.0 - PROB_EPS) {
        return Err(KernelError::DegeneratePropensity { value: v });
    }
    Ok(v)
}

fn check_selection(v: f64) -> Result<f64, KernelError> {
    if !(v > PROB_EPS && v < 1.0 - PROB_EPS) {
        return Err(KernelError::DegenerateSelection { value: v });
    }
    Ok(v)
}

fn check_mean(v: f64) -> Result<f64, KernelError> {
    if !(v > PROB_EPS && v < 1.0 - PROB_EPS) {
        return Err(KernelError::MeanOnBoundary { value: v });
    }
    Ok(v)
}

/// Inverse propensity weighted residual difference over the experimental
/// arms: `z(y - m11)/e - (1-z)(y - m10)/(1-e)`.
pub fn delta(z: u8, y: f64, eta: &NuisanceAt) -> Result<f64, KernelError> {
    let e = check_propensity(eta.e)?;
    let z = z as f64;
    Ok(z * (y - eta.m11) / e - (1.0 - z) * (y - eta.m10) / (1.0 - e))
}

/// Canonical gradient of the selected estimand at one observation.
pub fn phi0(s: u8, z: u8, y: f64, eta: &NuisanceAt, ctx: &KernelContext) -> Result<f64, KernelError> {
    let cate = eta.m11 - eta.m10;
    match ctx.kind {
        EstimandKind::Rct => {
            if s == 0 {
                return Ok(0.0);
            }
            let d = delta(z, y, eta)?;
            Ok((d + cate - ctx.tau) / ctx.rho)
        }
        EstimandKind::Obs => {
            let sf = s as f64;
            let exp_part = if s == 1 {
                let p = check_selection(eta.p)?;
                let d = delta(z, y, eta)?;
                sf * (1.0 - p) * d / (p * (1.0 - ctx.rho))
            } else {
                0.0
            };
            Ok(exp_part + (1.0 - sf) * (cate - ctx.tau) / (1.0 - ctx.rho))
        }
        EstimandKind::Tgt => {
            let ipw = if s == 1 {
                let p = check_selection(eta.p)?;
                let d = delta(z, y, eta)?;
                d / p
            } else {
                0.0
            };
            Ok(ipw + cate - ctx.tau)
        }
    }
}

/// Indicator-weighted inverse propensity kernel of the linear confounding
/// model.
pub fn h_confounding(s: u8, z: u8, eta: &NuisanceAt) -> Result<f64, KernelError> {
    let p = check_selection(eta.p)?;
    let e = check_propensity(eta.e)?;
    let q = check_propensity(eta.q)?;
    let (s, z) = (s as f64, z as f64);
    Ok(s * z / (p * e) - s * (1.0 - z) / (p * (1.0 - e)) - (1.0 - s) * z / ((1.0 - p) * q)
        + (1.0 - s) * (1.0 - z) / ((1.0 - p) * (1.0 - q)))
}

/// Propensity-weighted aggregate of the four variance functions.
pub fn sigma_x(eta: &NuisanceAt) -> Result<f64, KernelError> {
    let p = check_selection(eta.p)?;
    let e = check_propensity(eta.e)?;
    let q = check_propensity(eta.q)?;
    Ok(eta.v11
        + eta.v10 * e / (1.0 - e)
        + eta.v01 * p * e / ((1.0 - p) * q)
        + eta.v00 * p * e / ((1.0 - p) * (1.0 - q)))
}

/// Closed form of the conditional moment `E[phi0 (Y-m) h | X=x]` for the
/// three estimands.
pub fn i_conditional(eta: &NuisanceAt, ctx: &KernelContext) -> Result<f64, KernelError> {
    let e = check_propensity(eta.e)?;
    let rct = (eta.v11 / e + eta.v10 / (1.0 - e)) / ctx.rho;
    match ctx.kind {
        EstimandKind::Rct => Ok(rct),
        EstimandKind::Obs => {
            let p = check_selection(eta.p)?;
            Ok(rct * ctx.rho * (1.0 - p) / (p * (1.0 - ctx.rho)))
        }
        EstimandKind::Tgt => {
            let p = check_selection(eta.p)?;
            Ok(rct * ctx.rho / p)
        }
    }
}

/// One evaluation point for the Lagrange-multiplier solve: nuisances, the
/// basis expansion at that point, and an empirical weight.
#[derive(Debug, Clone)]
pub struct LambdaPoint {
    pub eta: NuisanceAt,
    pub psi: Vec<f64>,
    pub weight: f64,
}

/// Solve for the multiplier vector that makes the confounding adjustment
/// orthogonal to the basis: `lambda = -G^{-1} avg[I pe/Sigma psi]` with
/// `G = avg[pe/Sigma psi psi']`, population integrals replaced by weighted
/// averages over the supplied evaluation points.
pub fn lambda_solve(points: &[LambdaPoint], ctx: &KernelContext) -> Result<Vec<f64>, KernelError> {
    if points.is_empty() {
        return Err(KernelError::SingularGram);
    }
    let q = points[0].psi.len();
    let mut gram = DMatrix::zeros(q, q);
    let mut moment = DVector::zeros(q);
    let mut total = 0.0;
    for pt in points {
        let eta = &pt.eta;
        let p = check_selection(eta.p)?;
        let e = check_propensity(eta.e)?;
        let sig = sigma_x(eta)?;
        if sig <= 0.0 {
            return Err(KernelError::ZeroSigma);
        }
        let c = pt.weight * p * e / sig;
        let i_x = i_conditional(eta, ctx)?;
        for a in 0..q {
            moment[a] += c * i_x * pt.psi[a];
            for b in a..q {
                gram[(a, b)] += c * pt.psi[a] * pt.psi[b];
            }
        }
        total += pt.weight;
    }
    if total <= 0.0 {
        return Err(KernelError::SingularGram);
    }
    gram /= total;
    moment /= total;
    for a in 0..q {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let (sol, _) = solve_sym_ridge(&gram, &moment).map_err(|_| KernelError::SingularGram)?;
    Ok(sol.iter().map(|v| -v).collect())
}

/// Confounding adjustment weight `nu(x) = pe (I(x) + lambda'psi(x)) / Sigma(x)`.
///
/// A residual `I + lambda'psi` within 1e-10 (relative) of zero is returned
/// as exactly zero, so a fully absorbed adjustment vanishes identically
/// rather than injecting solver round-off into the one-step correction.
pub fn nu_confounding(
    eta: &NuisanceAt,
    ctx: &KernelContext,
    lambda: &[f64],
    psi_x: &[f64],
) -> Result<f64, KernelError> {
    let p = check_selection(eta.p)?;
    let e = check_propensity(eta.e)?;
    let sig = sigma_x(eta)?;
    if sig <= 0.0 {
        return Err(KernelError::ZeroSigma);
    }
    let i_x = i_conditional(eta, ctx)?;
    let dot: f64 = lambda.iter().zip(psi_x).map(|(a, b)| a * b).sum();
    let resid = i_x + dot;
    if resid.abs() <= NU_ZERO_TOL * i_x.abs().max(1.0) {
        return Ok(0.0);
    }
    Ok(p * e * resid / sig)
}

/// Indicator-weighted logit-derivative kernel of the outcome-mediated
/// selection model.
pub fn f_selection(s: u8, z: u8, eta: &NuisanceAt) -> Result<f64, KernelError> {
    let p = check_selection(eta.p)?;
    let e = check_propensity(eta.e)?;
    let q = check_propensity(eta.q)?;
    let (l11, l10, l01, l00) = (
        logit_deriv(check_mean(eta.m11)?),
        logit_deriv(check_mean(eta.m10)?),
        logit_deriv(check_mean(eta.m01)?),
        logit_deriv(check_mean(eta.m00)?),
    );
    let (s, z) = (s as f64, z as f64);
    Ok(s * z * l11 - s * (1.0 - z) * e * l10 / (1.0 - e)
        - (1.0 - s) * z * p * e * l01 / ((1.0 - p) * q)
        + (1.0 - s) * (1.0 - z) * p * e * l00 / ((1.0 - p) * (1.0 - q)))
}

/// Propensity-weighted sum of `V_sz (l'(m_sz))^2` terms for binary outcomes.
pub fn d_selection(eta: &NuisanceAt) -> Result<f64, KernelError> {
    let p = check_selection(eta.p)?;
    let e = check_propensity(eta.e)?;
    let q = check_propensity(eta.q)?;
    let term = |m: f64, v: f64| -> Result<f64, KernelError> {
        let l = logit_deriv(check_mean(m)?);
        Ok(v * l * l)
    };
    Ok(term(eta.m11, eta.v11)?
        + term(eta.m10, eta.v10)? * e / (1.0 - e)
        + term(eta.m01, eta.v01)? * p * e / ((1.0 - p) * q)
        + term(eta.m00, eta.v00)? * p * e / ((1.0 - p) * (1.0 - q)))
}

/// Closed-form projection coefficient of the selection adjustment for the
/// three estimands.
pub fn zeta_selection(eta: &NuisanceAt, ctx: &KernelContext) -> Result<f64, KernelError> {
    let e = check_propensity(eta.e)?;
    let d = d_selection(eta)?;
    if d <= 0.0 {
        return Err(KernelError::ZeroD);
    }
    let num = logit_deriv(check_mean(eta.m11)?) * eta.v11
        + logit_deriv(check_mean(eta.m10)?) * eta.v10 * e / (1.0 - e);
    let rct = num / (ctx.rho * e * d);
    match ctx.kind {
        EstimandKind::Rct => Ok(rct),
        EstimandKind::Obs => {
            let p = check_selection(eta.p)?;
            Ok(rct * ctx.rho * (1.0 - p) / ((1.0 - ctx.rho) * p))
        }
        EstimandKind::Tgt => {
            let p = check_selection(eta.p)?;
            Ok(rct * ctx.rho / p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eta_all(p: f64, e: f64, q: f64, m: [f64; 4], v: [f64; 4]) -> NuisanceAt {
        NuisanceAt {
            p,
            e,
            q,
            m11: m[0],
            m10: m[1],
            m01: m[2],
            m00: m[3],
            v11: v[0],
            v10: v[1],
            v01: v[2],
            v00: v[3],
        }
    }

    fn symmetric() -> NuisanceAt {
        eta_all(0.5, 0.5, 0.5, [0.5; 4], [0.25; 4])
    }

    #[test]
    fn delta_examples() {
        let eta = symmetric();
        // z=1, y = m11 -> 0
        assert_eq!(delta(1, 0.5, &eta).unwrap(), 0.0);
        // z=1, e=0.5, y=1, m11=0
        let mut eta2 = eta;
        eta2.m11 = 0.0;
        assert_eq!(delta(1, 1.0, &eta2).unwrap(), 2.0);
        // z=0, e=0.5, y=1, m10=0
        let mut eta3 = eta;
        eta3.m10 = 0.0;
        assert_eq!(delta(0, 1.0, &eta3).unwrap(), -2.0);
        // degenerate propensity
        let mut eta4 = eta;
        eta4.e = 1.0;
        assert!(matches!(delta(1, 1.0, &eta4), Err(KernelError::DegeneratePropensity { .. })));
    }

    #[test]
    fn phi0_examples() {
        let eta = symmetric();
        let ctx = KernelContext::new(EstimandKind::Rct, 0.0, 0.5).unwrap();
        // s=0 annihilates the experimental gradient
        assert_eq!(phi0(0, 1, 1.0, &eta, &ctx).unwrap(), 0.0);
        // s=1, z=1, rho=0.5, e=0.5, y=1, m11=m10=0.5, tau=0 -> 2
        assert_eq!(phi0(1, 1, 1.0, &eta, &ctx).unwrap(), 2.0);
        // tgt at s=0: only the centered contrast survives
        let mut eta2 = eta;
        eta2.m11 = 0.8;
        eta2.m10 = 0.5;
        let ctx = KernelContext::new(EstimandKind::Tgt, 0.3, 0.5).unwrap();
        assert!(phi0(0, 0, 1.0, &eta2, &ctx).unwrap().abs() < 1e-15);
    }

    #[test]
    fn h_examples() {
        let eta = symmetric();
        assert_eq!(h_confounding(1, 1, &eta).unwrap(), 4.0);
        assert_eq!(h_confounding(1, 0, &eta).unwrap(), -4.0);
        assert_eq!(h_confounding(0, 1, &eta).unwrap(), -4.0);
        assert_eq!(h_confounding(0, 0, &eta).unwrap(), 4.0);
        let mut eta2 = eta;
        eta2.e = 0.25;
        assert_eq!(h_confounding(1, 1, &eta2).unwrap(), 8.0);
    }

    #[test]
    fn sigma_examples() {
        assert!((sigma_x(&symmetric()).unwrap() - 1.0).abs() < 1e-15);
        let mut eta = symmetric();
        eta.v11 = 1.0;
        eta.v10 = 0.0;
        eta.v01 = 0.0;
        eta.v00 = 0.0;
        assert_eq!(sigma_x(&eta).unwrap(), 1.0);
        eta.v11 = 0.0;
        assert_eq!(sigma_x(&eta).unwrap(), 0.0);
    }

    #[test]
    fn i_conditional_examples_and_scalings() {
        let eta = symmetric();
        let rct = KernelContext::new(EstimandKind::Rct, 0.0, 0.5).unwrap();
        assert!((i_conditional(&eta, &rct).unwrap() - 2.0).abs() < 1e-15);
        // scaling identities at rho = p
        let obs = KernelContext::new(EstimandKind::Obs, 0.0, 0.5).unwrap();
        let tgt = KernelContext::new(EstimandKind::Tgt, 0.0, 0.5).unwrap();
        assert!((i_conditional(&eta, &obs).unwrap() - 2.0).abs() < 1e-15);
        assert!((i_conditional(&eta, &tgt).unwrap() - 2.0).abs() < 1e-15);

        // generic scaling relation
        let mut eta2 = eta;
        eta2.p = 0.3;
        eta2.v11 = 0.11;
        eta2.v10 = 0.19;
        let ratio = i_conditional(&eta2, &obs).unwrap() / i_conditional(&eta2, &rct).unwrap();
        assert!((ratio - 0.5 * 0.7 / (0.3 * 0.5)).abs() < 1e-12);
        let ratio = i_conditional(&eta2, &tgt).unwrap() / i_conditional(&eta2, &rct).unwrap();
        assert!((ratio - 0.5 / 0.3).abs() < 1e-12);
    }

    #[test]
    fn lambda_solve_hand_solved_two_points() {
        // Two points, psi = (1, x1), constructed so pe/Sigma = 1 and the
        // conditional moments are 2 and 4; the 2x2 system gives lambda = (-2,-2).
        let ctx = KernelContext::new(EstimandKind::Rct, 0.0, 0.125).unwrap();
        let a = eta_all(0.5, 0.5, 0.5, [0.5; 4], [0.0625; 4]);
        let b = eta_all(0.5, 0.5, 0.5, [0.5; 4], [0.125, 0.125, 0.0, 0.0]);
        let points = vec![
            LambdaPoint { eta: a, psi: vec![1.0, 0.0], weight: 1.0 },
            LambdaPoint { eta: b, psi: vec![1.0, 1.0], weight: 1.0 },
        ];
        let lambda = lambda_solve(&points, &ctx).unwrap();
        assert!((lambda[0] + 2.0).abs() < 1e-10, "lambda = {lambda:?}");
        assert!((lambda[1] + 2.0).abs() < 1e-10);
        // downstream: residuals cancel exactly at both points
        let nu_a = nu_confounding(&points[0].eta, &ctx, &lambda, &points[0].psi).unwrap();
        let nu_b = nu_confounding(&points[1].eta, &ctx, &lambda, &points[1].psi).unwrap();
        assert_eq!(nu_a, 0.0);
        assert_eq!(nu_b, 0.0);
    }

    #[test]
    fn lambda_intercept_only_absorbs_constant_moment() {
        // pe/Sigma and I constant, psi = intercept -> lambda = -I, nu == 0
        let ctx = KernelContext::new(EstimandKind::Rct, 0.0, 0.5).unwrap();
        let eta = symmetric(); // I = 2
        let points: Vec<LambdaPoint> = (0..5)
            .map(|_| LambdaPoint { eta, psi: vec![1.0], weight: 1.0 })
            .collect();
        let lambda = lambda_solve(&points, &ctx).unwrap();
        assert!((lambda[0] + 2.0).abs() < 1e-12);
        assert_eq!(nu_confounding(&eta, &ctx, &lambda, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn lambda_zero_moment() {
        let ctx = KernelContext::new(EstimandKind::Rct, 0.0, 0.5).unwrap();
        let mut eta = symmetric();
        eta.v11 = 0.0;
        eta.v10 = 0.0; // I = 0, Sigma stays positive through v01, v00
        let points = vec![LambdaPoint { eta, psi: vec![1.0], weight: 1.0 }];
        let lambda = lambda_solve(&points, &ctx).unwrap();
        assert!(lambda[0].abs() < 1e-15);
    }

    #[test]
    fn nu_plug_in() {
        // p=e=0.5, I + lambda'psi = 2, Sigma = 1 -> 0.5
        let ctx = KernelContext::new(EstimandKind::Rct, 0.0, 0.5).unwrap();
        let eta = symmetric(); // I = 2, Sigma = 1
        let nu = nu_confounding(&eta, &ctx, &[0.0], &[1.0]).unwrap();
        assert!((nu - 0.5).abs() < 1e-15);
    }

    #[test]
    fn f_selection_examples() {
        let eta = symmetric();
        assert_eq!(f_selection(1, 1, &eta).unwrap(), 4.0);
        assert_eq!(f_selection(1, 0, &eta).unwrap(), -4.0);
        assert_eq!(f_selection(0, 1, &eta).unwrap(), -4.0);
        assert_eq!(f_selection(0, 0, &eta).unwrap(), 4.0);
        // m11 = 0.5 pins the (1,1) value regardless of p, e, q
        let eta2 = eta_all(0.3, 0.7, 0.2, [0.5, 0.4, 0.6, 0.3], [0.25; 4]);
        assert_eq!(f_selection(1, 1, &eta2).unwrap(), 4.0);
        // m00 = 0.9 scales the (0,0) term by l'(0.9) = 100/9
        let mut eta3 = eta;
        eta3.m00 = 0.9;
        let expect = 0.25 * (100.0 / 9.0) / 0.25;
        assert!((f_selection(0, 0, &eta3).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn d_selection_examples() {
        let eta = symmetric();
        assert!((d_selection(&eta).unwrap() - 16.0).abs() < 1e-12);
        // binary-variance identity: V l'^2 = l' when V = m(1-m)
        let eta2 = eta_all(0.5, 0.5, 0.5, [0.3, 0.6, 0.7, 0.4], [0.21, 0.24, 0.21, 0.24]);
        let direct = d_selection(&eta2).unwrap();
        let via_lprime = logit_deriv(0.3) + logit_deriv(0.6) + logit_deriv(0.7) + logit_deriv(0.4);
        assert!((direct - via_lprime).abs() < 1e-9);
        // multipliers at e=0.25, p=q=0.5: 1, 1/3, pe/((1-p)q) = 1/2, 1/2
        let eta3 = eta_all(0.5, 0.25, 0.5, [0.5; 4], [0.25; 4]);
        let expect = 4.0 * (1.0 + 1.0 / 3.0 + 0.5 + 0.5);
        assert!((d_selection(&eta3).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn zeta_examples_and_scalings() {
        let eta = symmetric();
        let rct = KernelContext::new(EstimandKind::Rct, 0.0, 0.5).unwrap();
        assert!((zeta_selection(&eta, &rct).unwrap() - 0.5).abs() < 1e-15);

        let eta2 = eta_all(0.3, 0.6, 0.4, [0.55, 0.45, 0.75, 0.35], [0.2475, 0.2475, 0.1875, 0.2275]);
        let obs = KernelContext::new(EstimandKind::Obs, 0.0, 0.4).unwrap();
        let rct2 = KernelContext::new(EstimandKind::Rct, 0.0, 0.4).unwrap();
        let ratio = zeta_selection(&eta2, &obs).unwrap() / zeta_selection(&eta2, &rct2).unwrap();
        assert!((ratio - 0.4 * 0.7 / (0.6 * 0.3)).abs() < 1e-12);
        let tgt = KernelContext::new(EstimandKind::Tgt, 0.0, 0.3).unwrap();
        let rct3 = KernelContext::new(EstimandKind::Rct, 0.0, 0.3).unwrap();
        let ratio = zeta_selection(&eta2, &tgt).unwrap() / zeta_selection(&eta2, &rct3).unwrap();
        assert!((ratio - 0.3 / 0.3).abs() < 1e-12);
    }

    #[test]
    fn kernels_are_pure() {
        let eta = eta_all(0.37, 0.61, 0.43, [0.52, 0.47, 0.66, 0.31], [0.2496, 0.2491, 0.2244, 0.2139]);
        let ctx = KernelContext::new(EstimandKind::Obs, 0.123, 0.41).unwrap();
        for _ in 0..3 {
            assert_eq!(
                phi0(1, 1, 1.0, &eta, &ctx).unwrap().to_bits(),
                phi0(1, 1, 1.0, &eta, &ctx).unwrap().to_bits()
            );
            assert_eq!(
                zeta_selection(&eta, &ctx).unwrap().to_bits(),
                zeta_selection(&eta, &ctx).unwrap().to_bits()
            );
            assert_eq!(
                sigma_x(&eta).unwrap().to_bits(),
                sigma_x(&eta).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn degenerate_guards_fire() {
        let mut eta = symmetric();
        eta.p = 1.0 - 1e-13;
        assert!(matches!(
            h_confounding(1, 1, &eta),
            Err(KernelError::DegenerateSelection { .. })
        ));
        let mut eta2 = symmetric();
        eta2.m10 = 1.0;
        assert!(matches!(f_selection(1, 1, &eta2), Err(KernelError::MeanOnBoundary { .. })));
        let mut eta3 = symmetric();
        eta3.v11 = 0.0;
        eta3.v10 = 0.0;
        eta3.v01 = 0.0;
        eta3.v00 = 0.0;
        let ctx = KernelContext::new(EstimandKind::Rct, 0.0, 0.5).unwrap();
        assert!(matches!(nu_confounding(&eta3, &ctx, &[0.0], &[1.0]), Err(KernelError::ZeroSigma)));
        assert!(matches!(zeta_selection(&eta3, &ctx), Err(KernelError::ZeroD)));
        assert!(KernelContext::new(EstimandKind::Rct, 0.0, 1.0).is_err());
    }
}
