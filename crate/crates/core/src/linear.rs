//! G-estimation on the additive scale.
//!
//! Profiling the treatment-free coefficients out of the estimating equation
//! leaves `U(psi) = h_psi' W (y~ - A h_psi psi)` with `W = D (I - H_beta)`,
//! which is linear in `psi` and solved in closed form. The same pieces give
//! the quasi-likelihood `Q(psi) = psi'm - psi'M psi / 2`.

use nalgebra::{DMatrix, DVector};

use crate::data::{scale_rows, DesignMatrices};
use crate::error::{GestError, Result};
use crate::linalg::{self, Projector};

/// Blip values for one later stage, per subject: under the estimated optimal
/// treatment and under the treatment actually received.
#[derive(Debug, Clone, PartialEq)]
pub struct BlipValues {
    pub optimal: DVector<f64>,
    pub observed: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearStageFit {
    pub psi: DVector<f64>,
    pub beta: DVector<f64>,
    /// Treatment residuals `d`; together with the treatment-free projection
    /// they define the action of `W`.
    pub d: DVector<f64>,
    pub m: DVector<f64>,
    pub big_m: DMatrix<f64>,
    /// `(I - H_beta)(y~ - A h_psi psi_hat)`.
    pub residuals: DVector<f64>,
    pub q_at_psi_hat: f64,
    /// Condition number of `M`.
    pub condition: f64,
}

/// `y~_j = y + sum over later stages of (optimal blip - observed blip)`.
pub fn pseudo_outcome_linear(y: &DVector<f64>, later: &[BlipValues]) -> Result<DVector<f64>> {
    let mut out = y.clone();
    for (k, b) in later.iter().enumerate() {
        if b.optimal.len() != y.len() || b.observed.len() != y.len() {
            return Err(GestError::Dimension(format!(
                "later-stage blip set {k} has {}/{} values for {} subjects",
                b.optimal.len(),
                b.observed.len(),
                y.len()
            )));
        }
        out += &b.optimal - &b.observed;
    }
    Ok(out)
}

pub fn quasi_likelihood_linear(psi: &DVector<f64>, m: &DVector<f64>, big_m: &DMatrix<f64>) -> f64 {
    linalg::quadratic_q(psi, m, big_m)
}

pub(crate) fn treatment_free_projector(h_beta: &DMatrix<f64>) -> Result<Projector> {
    Projector::new(h_beta).map_err(|e| GestError::Singular {
        context: "treatment-free design".into(),
        condition: e.condition,
    })
}

pub fn stage_fit_linear(
    y_tilde: &DVector<f64>,
    design: &DesignMatrices,
    d: &DVector<f64>,
) -> Result<LinearStageFit> {
    check_lengths(y_tilde, design, d)?;
    let proj = treatment_free_projector(&design.h_beta)?;
    fit_with_projector(y_tilde, &design.h_psi, &design.a, d, &proj)
}

fn check_lengths(y: &DVector<f64>, design: &DesignMatrices, d: &DVector<f64>) -> Result<()> {
    let n = design.n();
    if y.len() != n || d.len() != n || design.h_psi.nrows() != n || design.h_beta.nrows() != n {
        return Err(GestError::Dimension(format!(
            "stage inputs disagree on n: y~ {}, d {}, a {}, h_psi {}, h_beta {}",
            y.len(),
            d.len(),
            n,
            design.h_psi.nrows(),
            design.h_beta.nrows()
        )));
    }
    Ok(())
}

/// Closed-form fit against a prepared treatment-free projection, so candidate
/// blip models at one stage can share it.
pub(crate) fn fit_with_projector(
    y_tilde: &DVector<f64>,
    h_psi: &DMatrix<f64>,
    a: &DVector<f64>,
    d: &DVector<f64>,
    proj: &Projector,
) -> Result<LinearStageFit> {
    let dh = scale_rows(h_psi, d);
    let ah = scale_rows(h_psi, a);
    let ry = proj.residual(y_tilde);
    let rx = proj.residual_matrix(&ah);
    let m = dh.transpose() * &ry;
    let big_m = dh.transpose() * &rx;
    let condition = linalg::condition_number(&big_m);
    let psi = linalg::solve_square(&big_m, &m)
        .map_err(|e| GestError::Identifiability { condition: e.condition })?;
    let adjusted = y_tilde - &ah * &psi;
    let beta = proj.coefficients(&adjusted);
    let residuals = &ry - &rx * &psi;
    let q_at_psi_hat = quasi_likelihood_linear(&psi, &m, &big_m);
    Ok(LinearStageFit {
        psi,
        beta,
        d: d.clone(),
        m,
        big_m,
        residuals,
        q_at_psi_hat,
        condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(h_psi: DMatrix<f64>, h_beta: DMatrix<f64>, a: Vec<f64>) -> DesignMatrices {
        let n = a.len();
        DesignMatrices {
            h_psi,
            h_psi_quad: DMatrix::zeros(n, 0),
            h_beta,
            h_alpha: DMatrix::from_element(n, 1, 1.0),
            a: DVector::from_vec(a),
        }
    }

    fn toy() -> (DesignMatrices, DVector<f64>) {
        let x = [0.3, -1.2, 0.8, 1.5, -0.4, 0.1, 2.0, -0.7];
        let a = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let n = x.len();
        let mut h = DMatrix::zeros(n, 2);
        for i in 0..n {
            h[(i, 0)] = 1.0;
            h[(i, 1)] = x[i];
        }
        let d = DVector::from_vec(vec![0.6, -0.3, 0.4, 0.2, -0.7, -0.5, 0.3, -0.45]);
        (design(h.clone(), h, a), d)
    }

    #[test]
    fn final_stage_pseudo_outcome_is_outcome() {
        let y = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(pseudo_outcome_linear(&y, &[]).unwrap(), y);
        let same = BlipValues {
            optimal: DVector::from_vec(vec![0.4, 1.0]),
            observed: DVector::from_vec(vec![0.4, 1.0]),
        };
        assert_eq!(pseudo_outcome_linear(&y, &[same]).unwrap(), y);
    }

    #[test]
    fn pseudo_outcome_adds_regret() {
        let y = DVector::from_vec(vec![2.0]);
        let b = BlipValues {
            optimal: DVector::from_vec(vec![1.0]),
            observed: DVector::from_vec(vec![0.5]),
        };
        assert_eq!(pseudo_outcome_linear(&y, &[b]).unwrap()[0], 2.5);
        let bad = BlipValues {
            optimal: DVector::zeros(2),
            observed: DVector::zeros(1),
        };
        assert!(pseudo_outcome_linear(&y, &[bad]).is_err());
    }

    #[test]
    fn noiseless_data_is_interpolated() {
        let (des, d) = toy();
        let beta_true = DVector::from_vec(vec![0.7, -1.1]);
        let psi_true = DVector::from_vec(vec![1.3, 0.4]);
        let y = &des.h_beta * &beta_true + des.a_h_psi() * &psi_true;
        let fit = stage_fit_linear(&y, &des, &d).unwrap();
        assert!(linalg::max_abs(&(&fit.psi - &psi_true)) < 1e-10);
        assert!(linalg::max_abs(&(&fit.beta - &beta_true)) < 1e-10);
        assert!(linalg::max_abs(&fit.residuals) < 1e-10);
    }

    #[test]
    fn stationarity_and_beta_orthogonality() {
        let (des, d) = toy();
        let y = DVector::from_vec(vec![1.0, 0.2, 2.5, 3.1, -0.4, 0.0, 4.2, -1.0]);
        let fit = stage_fit_linear(&y, &des, &d).unwrap();
        assert!(linalg::max_abs(&(&fit.m - &fit.big_m * &fit.psi)) < 1e-8);
        let r = &y - &des.h_beta * &fit.beta - des.a_h_psi() * &fit.psi;
        assert!(linalg::max_abs(&(des.h_beta.transpose() * r)) < 1e-8);
        let q = quasi_likelihood_linear(&fit.psi, &fit.m, &fit.big_m);
        assert!((q - 0.5 * fit.psi.dot(&fit.m)).abs() < 1e-10);
        assert_eq!(q, fit.q_at_psi_hat);
    }

    #[test]
    fn zero_treatment_residuals_are_not_identifiable() {
        let (des, _) = toy();
        let y = DVector::from_element(8, 1.0);
        let d = DVector::zeros(8);
        assert!(matches!(
            stage_fit_linear(&y, &des, &d),
            Err(GestError::Identifiability { .. })
        ));
    }

    #[test]
    fn rank_deficient_treatment_free_design() {
        let (mut des, d) = toy();
        des.h_beta = DMatrix::from_element(8, 2, 1.0);
        assert!(matches!(
            stage_fit_linear(&DVector::zeros(8), &des, &d),
            Err(GestError::Singular { .. })
        ));
    }

    #[test]
    fn null_psi_has_zero_quasi_likelihood() {
        let m = DVector::from_vec(vec![1.0, 2.0]);
        let big_m = DMatrix::identity(2, 2);
        assert_eq!(quasi_likelihood_linear(&DVector::zeros(2), &m, &big_m), 0.0);
    }

    #[test]
    fn scaling_the_outcome_scales_psi() {
        let (des, d) = toy();
        let y = DVector::from_vec(vec![1.0, 0.2, 2.5, 3.1, -0.4, 0.0, 4.2, -1.0]);
        let base = stage_fit_linear(&y, &des, &d).unwrap();
        let scaled = stage_fit_linear(&(&y * 4.0), &des, &d).unwrap();
        assert!(linalg::max_abs(&(&scaled.psi - &base.psi * 4.0)) < 1e-12);
    }
}
