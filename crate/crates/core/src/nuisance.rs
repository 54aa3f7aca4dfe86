//! Treatment models and the treatment residuals that weight every
//! G-estimating equation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GestError, Result};
use crate::linalg::{self, Projector};

const LOGISTIC_TOL: f64 = 1e-8;
const LOGISTIC_MAX_ITER: usize = 100;
const BOUNDARY_EPS: f64 = 1e-10;
const SEPARATION_COEF: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentFit {
    pub alpha: Vec<f64>,
    /// `E[A | h_alpha]` per subject.
    pub fitted: Vec<f64>,
    /// `E[A^2 | h_alpha]` per subject (continuous treatments only).
    pub second_moment: Option<Vec<f64>>,
    /// Residual variance of the homoscedastic dose model.
    pub sigma2: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn bernoulli_loglik(eta: &DVector<f64>, a: &DVector<f64>) -> f64 {
    eta.iter().zip(a.iter()).map(|(e, y)| y * e - softplus(*e)).sum()
}

fn check_rows(h: &DMatrix<f64>, a: &DVector<f64>) -> Result<()> {
    if h.nrows() != a.len() {
        return Err(GestError::Dimension(format!(
            "treatment design has {} rows but {} treatments",
            h.nrows(),
            a.len()
        )));
    }
    Ok(())
}

/// Logistic regression of a binary treatment by Newton-Raphson with step halving.
pub fn fit_logistic(h_alpha: &DMatrix<f64>, a: &DVector<f64>) -> Result<TreatmentFit> {
    check_rows(h_alpha, a)?;
    if a.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(GestError::Domain("logistic treatment model needs 0/1 treatments".into()));
    }
    if let Err(e) = Projector::new(h_alpha) {
        return Err(GestError::Singular {
            context: "treatment model design".into(),
            condition: e.condition,
        });
    }

    let p = h_alpha.ncols();
    let mut alpha = DVector::zeros(p);
    let mut eta = h_alpha * &alpha;
    let mut loglik = bernoulli_loglik(&eta, a);
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=LOGISTIC_MAX_ITER {
        iterations = it;
        let prob = eta.map(expit);
        let w = prob.map(|q| q * (1.0 - q));
        let grad = h_alpha.transpose() * (a - &prob);
        let mut hess = DMatrix::zeros(p, p);
        for (i, row) in h_alpha.row_iter().enumerate() {
            hess += row.transpose() * row * w[i];
        }
        let step = match linalg::solve_square(&hess, &grad) {
            Ok(s) => s,
            // A flat likelihood surface here means the fitted probabilities
            // have run into the boundary.
            Err(_) => break,
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = &alpha + &step * scale;
            let cand_eta = h_alpha * &cand;
            let ll = bernoulli_loglik(&cand_eta, a);
            if ll >= loglik - 1e-12 * loglik.abs().max(1.0) {
                accepted = Some((cand, cand_eta, ll));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, cand_eta, ll)) = accepted else {
            break;
        };
        let change = linalg::max_abs(&(&cand - &alpha));
        alpha = cand;
        eta = cand_eta;
        loglik = ll;
        if change < LOGISTIC_TOL {
            converged = true;
            break;
        }
    }

    let fitted = eta.map(expit);
    let max_abs_coef = linalg::max_abs(&alpha);
    let at_boundary = fitted
        .iter()
        .any(|&q| q < BOUNDARY_EPS || q > 1.0 - BOUNDARY_EPS);
    if at_boundary && (max_abs_coef > SEPARATION_COEF || !converged) {
        return Err(GestError::Separation { max_abs_coef });
    }
    Ok(TreatmentFit {
        alpha: alpha.iter().cloned().collect(),
        fitted: fitted.iter().cloned().collect(),
        second_moment: None,
        sigma2: None,
        converged,
        iterations,
    })
}

/// Ordinary least squares dose model with homoscedastic residual variance;
/// `E[A^2 | H] = fitted^2 + sigma^2`.
pub fn fit_continuous_treatment(h_alpha: &DMatrix<f64>, a: &DVector<f64>) -> Result<TreatmentFit> {
    check_rows(h_alpha, a)?;
    let proj = Projector::new(h_alpha).map_err(|e| GestError::Singular {
        context: "treatment model design".into(),
        condition: e.condition,
    })?;
    let alpha = proj.coefficients(a);
    let fitted = h_alpha * &alpha;
    let resid = a - &fitted;
    let n = a.len();
    let p = h_alpha.ncols();
    let sigma2 = if n > p {
        resid.norm_squared() / (n - p) as f64
    } else {
        0.0
    };
    let second = fitted.map(|f| f * f + sigma2);
    Ok(TreatmentFit {
        alpha: alpha.iter().cloned().collect(),
        fitted: fitted.iter().cloned().collect(),
        second_moment: Some(second.iter().cloned().collect()),
        sigma2: Some(sigma2),
        converged: true,
        iterations: 1,
    })
}

/// `d_i = a_i - E[A_i | h_i]`.
pub fn treatment_residuals(fit: &TreatmentFit, a: &DVector<f64>) -> Result<DVector<f64>> {
    if fit.fitted.len() != a.len() {
        return Err(GestError::Dimension(format!(
            "treatment fit has {} rows but {} treatments were given",
            fit.fitted.len(),
            a.len()
        )));
    }
    Ok(DVector::from_iterator(
        a.len(),
        a.iter().zip(&fit.fitted).map(|(x, f)| x - f),
    ))
}

/// `a_i^2 - E[A_i^2 | h_i]`, the residual paired with quadratic blip terms.
pub fn second_moment_residuals(fit: &TreatmentFit, a: &DVector<f64>) -> Result<DVector<f64>> {
    let second = fit.second_moment.as_ref().ok_or_else(|| {
        GestError::State("treatment fit carries no second moments; fit a continuous model".into())
    })?;
    if second.len() != a.len() {
        return Err(GestError::Dimension(format!(
            "treatment fit has {} rows but {} treatments were given",
            second.len(),
            a.len()
        )));
    }
    Ok(DVector::from_iterator(
        a.len(),
        a.iter().zip(second).map(|(x, m2)| x * x - m2),
    ))
}
