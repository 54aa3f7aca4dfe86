//! G-estimation with a continuous dose and a blip quadratic in the dose.
//!
//! The blip is `a h1 psi1 + a^2 h2 psi2`. Linear blip columns are paired
//! with the dose residual `a - E[A|H]`, quadratic ones with
//! `a^2 - E[A^2|H]`, giving the stacked linear system
//! `S' (I - H_beta) (y~ - X psi) = 0` with `S = [D1 h1, D2 h2]` and
//! `X = [A h1, A^2 h2]`.

use nalgebra::{DMatrix, DVector};

use crate::data::{scale_rows, DesignMatrices, DoseRange};
use crate::error::{GestError, Result};
use crate::linalg::{self, Projector};
use crate::linear::treatment_free_projector;

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousStageFit {
    pub psi1: DVector<f64>,
    pub psi2: DVector<f64>,
    pub beta: DVector<f64>,
    pub d1: DVector<f64>,
    pub d2: DVector<f64>,
    pub m_c: DVector<f64>,
    pub big_m_c: DMatrix<f64>,
    /// `(I - H_beta)(y~ - X psi_hat)`.
    pub residuals: DVector<f64>,
    pub q_at_psi_hat: f64,
    pub condition: f64,
}

impl ContinuousStageFit {
    /// `(psi1, psi2)` stacked.
    pub fn psi(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.psi1.len() + self.psi2.len());
        v.rows_mut(0, self.psi1.len()).copy_from(&self.psi1);
        v.rows_mut(self.psi1.len(), self.psi2.len()).copy_from(&self.psi2);
        v
    }
}

pub fn stage_fit_continuous(
    y_tilde: &DVector<f64>,
    design: &DesignMatrices,
    d1: &DVector<f64>,
    d2: &DVector<f64>,
) -> Result<ContinuousStageFit> {
    let n = design.n();
    if y_tilde.len() != n
        || d1.len() != n
        || d2.len() != n
        || design.h_psi.nrows() != n
        || design.h_psi_quad.nrows() != n
        || design.h_beta.nrows() != n
    {
        return Err(GestError::Dimension(format!(
            "continuous stage inputs disagree on n = {n}"
        )));
    }
    let proj = treatment_free_projector(&design.h_beta)?;
    fit_continuous_with_projector(y_tilde, design, d1, d2, &proj)
}

pub(crate) fn fit_continuous_with_projector(
    y_tilde: &DVector<f64>,
    design: &DesignMatrices,
    d1: &DVector<f64>,
    d2: &DVector<f64>,
    proj: &Projector,
) -> Result<ContinuousStageFit> {
    let p1 = design.h_psi.ncols();
    let p2 = design.h_psi_quad.ncols();
    let n = design.n();
    let a2 = design.a.map(|v| v * v);
    let mut s = DMatrix::zeros(n, p1 + p2);
    let mut x = DMatrix::zeros(n, p1 + p2);
    s.columns_mut(0, p1).copy_from(&scale_rows(&design.h_psi, d1));
    s.columns_mut(p1, p2).copy_from(&scale_rows(&design.h_psi_quad, d2));
    x.columns_mut(0, p1).copy_from(&scale_rows(&design.h_psi, &design.a));
    x.columns_mut(p1, p2).copy_from(&scale_rows(&design.h_psi_quad, &a2));

    let ry = proj.residual(y_tilde);
    let rx = proj.residual_matrix(&x);
    let m_c = s.transpose() * &ry;
    let big_m_c = s.transpose() * &rx;
    let condition = linalg::condition_number(&big_m_c);
    let psi = linalg::solve_square(&big_m_c, &m_c)
        .map_err(|e| GestError::Identifiability { condition: e.condition })?;
    let beta = proj.coefficients(&(y_tilde - &x * &psi));
    let residuals = &ry - &rx * &psi;
    let q_at_psi_hat = linalg::quadratic_q(&psi, &m_c, &big_m_c);
    Ok(ContinuousStageFit {
        psi1: psi.rows(0, p1).into_owned(),
        psi2: psi.rows(p1, p2).into_owned(),
        beta,
        d1: d1.clone(),
        d2: d2.clone(),
        m_c,
        big_m_c,
        residuals,
        q_at_psi_hat,
        condition,
    })
}

/// Dose maximizing `a (h psi1) + a^2 (h psi2)` on the closed range. A concave
/// blip peaks at its clamped vertex; otherwise the better endpoint wins, with
/// ties going to the lower dose.
pub fn optimal_dose(lin: f64, quad: f64, range: DoseRange) -> f64 {
    let blip = |a: f64| a * lin + a * a * quad;
    if quad < 0.0 {
        (-lin / (2.0 * quad)).clamp(range.lo, range.hi)
    } else if blip(range.hi) > blip(range.lo) {
        range.hi
    } else {
        range.lo
    }
}

/// [`optimal_dose`] for one subject from blip rows and coefficients.
pub fn optimal_dose_for(
    psi1: &DVector<f64>,
    psi2: &DVector<f64>,
    h1: &[f64],
    h2: &[f64],
    range: DoseRange,
) -> f64 {
    let lin: f64 = h1.iter().zip(psi1.iter()).map(|(h, p)| h * p).sum();
    let quad: f64 = h2.iter().zip(psi2.iter()).map(|(h, p)| h * p).sum();
    optimal_dose(lin, quad, range)
}

pub fn quasi_likelihood_continuous(psi: &DVector<f64>, m_c: &DVector<f64>, big_m_c: &DMatrix<f64>) -> f64 {
    linalg::quadratic_q(psi, m_c, big_m_c)
}
