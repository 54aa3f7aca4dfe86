//! Sandwich variance, the trace penalty, QIC and Wald tests.
//!
//! All matrices are totals over subjects rather than per-subject averages;
//! `tr(J I^-1)` and `I^-1 J I^-T` are the same either way.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::continuous::ContinuousStageFit;
use crate::data::{scale_rows, DesignMatrices};
use crate::error::{GestError, Result};
use crate::linalg;
use crate::linear::LinearStageFit;
use crate::loglinear::LoglinearStageFit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageInference {
    pub i_hat: DMatrix<f64>,
    pub j_hat: DMatrix<f64>,
    pub v_hat: DMatrix<f64>,
    pub q: f64,
    pub k: f64,
    pub qic: f64,
    pub se: Vec<f64>,
    /// `None` where a variance estimate is not positive.
    pub wald_p: Vec<Option<f64>>,
}

/// Per-subject scores `u_i = d_i e_i h_psi,i` for an additive fit.
pub fn score_matrix_linear(fit: &LinearStageFit, design: &DesignMatrices) -> DMatrix<f64> {
    scale_rows(&design.h_psi, &fit.d.component_mul(&fit.residuals))
}

/// Per-subject scores at the IRLS solution: the blip summands
/// `d_i (y~_i / mu_i - 1) h_psi,i` minus their projection on the
/// treatment-free score, which accounts for estimating `beta`.
pub fn score_matrix_loglinear(fit: &LoglinearStageFit, design: &DesignMatrices) -> Result<DMatrix<f64>> {
    if !fit.converged {
        return Err(GestError::State("scores requested for a non-converged IRLS fit".into()));
    }
    let r = fit.d.component_mul(&fit.y_tilde.component_div(&fit.mu).add_scalar(-1.0));
    let u = scale_rows(&design.h_psi, &r);
    // Subtract the part of the blip score explained by estimating beta.
    let c = scale_rows(&design.h_psi, &fit.d.component_mul(&fit.y_tilde.component_div(&fit.mu))).transpose() * &design.h_beta;
    let f = scale_rows(&design.h_beta, &fit.mu).transpose() * &design.h_beta;
    let s = scale_rows(&design.h_beta, &(&fit.y_tilde - &fit.mu));
    let finv = inverse_of(&f)?;
    Ok(u - s * finv * c.transpose())
}

/// Per-subject scores `[d1_i h1_i, d2_i h2_i] e_i` for a dose fit.
pub fn score_matrix_continuous(fit: &ContinuousStageFit, design: &DesignMatrices) -> DMatrix<f64> {
    let p1 = design.h_psi.ncols();
    let p2 = design.h_psi_quad.ncols();
    let mut u = DMatrix::zeros(design.n(), p1 + p2);
    u.columns_mut(0, p1)
        .copy_from(&scale_rows(&design.h_psi, &fit.d1.component_mul(&fit.residuals)));
    u.columns_mut(p1, p2)
        .copy_from(&scale_rows(&design.h_psi_quad, &fit.d2.component_mul(&fit.residuals)));
    u
}

/// Adds the first-order effect of estimating the treatment model to per-subject
/// scores: `u_i + G I_alpha^-1 s_alpha,i`, with `G = dU/dalpha` summed over
/// subjects, `s_alpha` the treatment-model scores and `I_alpha` their information.
pub fn correct_for_treatment_model(
    u: &DMatrix<f64>,
    g: &DMatrix<f64>,
    s_alpha: &DMatrix<f64>,
    i_alpha: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let inv = linalg::inverse(i_alpha).map_err(|e| GestError::Singular {
        context: "treatment model information".into(),
        condition: e.condition,
    })?;
    Ok(u + s_alpha * inv.transpose() * g.transpose())
}

/// `J = sum_i u_i u_i'`.
pub fn outer_product(u: &DMatrix<f64>) -> DMatrix<f64> {
    u.transpose() * u
}

fn inverse_of(i_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    linalg::inverse(i_hat).map_err(|e| GestError::Singular {
        context: "information matrix".into(),
        condition: e.condition,
    })
}

/// `I^-1 J I^-T`, symmetrized.
pub fn sandwich_variance(i_hat: &DMatrix<f64>, j_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = inverse_of(i_hat)?;
    let v = &inv * j_hat * inv.transpose();
    Ok((&v + v.transpose()) * 0.5)
}

/// `K = tr(J I^-1)`.
pub fn trace_term(i_hat: &DMatrix<f64>, j_hat: &DMatrix<f64>) -> Result<f64> {
    let inv = inverse_of(i_hat)?;
    Ok((j_hat * inv).trace())
}

pub fn qic(q: f64, k: f64) -> f64 {
    -2.0 * q + 2.0 * k
}

/// Two-sided normal-reference p-values for each coefficient.
pub fn wald_pvalues(psi: &DVector<f64>, v_hat: &DMatrix<f64>) -> Result<Vec<f64>> {
    psi.iter()
        .enumerate()
        .map(|(k, &p)| {
            let var = v_hat[(k, k)];
            if !(var > 0.0) || !var.is_finite() {
                return Err(GestError::Domain(format!(
                    "coefficient {k} has nonpositive variance {var}"
                )));
            }
            Ok(two_sided_p(p / var.sqrt()))
        })
        .collect()
}

pub(crate) fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Assembles every inferential summary for one stage fit.
pub fn stage_inference(
    psi: &DVector<f64>,
    q: f64,
    i_hat: &DMatrix<f64>,
    scores: &DMatrix<f64>,
) -> Result<StageInference> {
    let j_hat = outer_product(scores);
    let v_hat = sandwich_variance(i_hat, &j_hat)?;
    let k = trace_term(i_hat, &j_hat)?;
    let se = (0..psi.len()).map(|i| v_hat[(i, i)].max(0.0).sqrt()).collect();
    let wald_p = (0..psi.len())
        .map(|i| {
            let var = v_hat[(i, i)];
            (var > 0.0 && var.is_finite()).then(|| two_sided_p(psi[i] / var.sqrt()))
        })
        .collect();
    Ok(StageInference {
        i_hat: i_hat.clone(),
        j_hat,
        v_hat,
        q,
        k,
        qic: qic(q, k),
        se,
        wald_p,
    })
}
