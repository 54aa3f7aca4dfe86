//! G-estimation for multiplicative blips by iteratively reweighted least squares.
//!
//! At each stage the pair of estimating equations
//!
//! ```text
//! 0 = sum_i d_i h_psi,i (y~_i / mu_i - 1)   (blip)
//! 0 = sum_i h_beta,i    (y~_i - mu_i)       (treatment-free)
//! mu_i = exp(h_beta,i beta + a_i h_psi,i psi)
//! ```
//!
//! is solved by linearizing `mu` around the current linear predictor. With
//! the log link and `V(mu) = mu`, the working response is
//! `z = eta + (y~ - mu) / mu` and the working weight is `w = mu`. The blip
//! equation is the working residual `z - eta` weighted by `d`, so the blip
//! update has the closed form of the linear case with the treatment-free
//! projection weighted by `w`. Because `y~ / mu - 1` is proportional to
//! `G - exp(h_beta beta)` with a factor depending on history only, the blip
//! equation stays unbiased when the treatment model is right even if the
//! treatment-free model is wrong.
//!
//! The reported iteration stops when the sup-norm change in `eta` drops
//! below `eps_eta`. Step halving averages each raw update with the previous
//! iterate. A converged run is finished with a few undamped Newton steps so
//! the returned parameters solve both equations to working precision.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{scale_rows, DesignMatrices};
use crate::error::{GestError, Result};
use crate::linalg::{self, Projector};

/// Largest |eta| accepted before exp() is considered to have overflowed.
pub const ETA_LIMIT: f64 = 700.0;

/// Normalized estimating-equation residual a converged fit must reach.
pub const FIXED_POINT_TOL: f64 = 1e-6;

const POLISH_TOL: f64 = 1e-10;
const POLISH_MAX_ITER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrlsOptions {
    pub eps_eta: f64,
    pub max_iter: usize,
    pub damping: bool,
    pub zero_replacement: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            eps_eta: 0.001,
            max_iter: 1000,
            damping: true,
            zero_replacement: 0.001,
        }
    }
}

impl IrlsOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_eta > 0.0) {
            return Err(GestError::Domain("eps_eta must be positive".into()));
        }
        if self.max_iter < 1 {
            return Err(GestError::Domain("max_iter must be at least 1".into()));
        }
        if !(self.zero_replacement > 0.0) {
            return Err(GestError::Domain("zero_replacement must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoglinearStageFit {
    pub psi: DVector<f64>,
    pub beta: DVector<f64>,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
    /// Working response at the returned parameters.
    pub z: DVector<f64>,
    /// Working weights at the returned parameters.
    pub w: DVector<f64>,
    pub d: DVector<f64>,
    pub y_tilde: DVector<f64>,
    pub converged: bool,
    /// IRLS iterations until the eta criterion was met (or the limit).
    pub iterations: usize,
    pub polish_iterations: usize,
    /// Normalized sup-norm of the blip estimating equation.
    pub ee_residual: f64,
    /// Normalized sup-norm of the treatment-free estimating equation.
    pub beta_ee_residual: f64,
    pub q_at_psi_hat: f64,
    pub m_tilde: DVector<f64>,
    pub big_m_tilde: DMatrix<f64>,
    /// Negative derivative of the blip equation in psi with beta profiled
    /// out: `h_psi' diag(d y~/mu) (I - P_w) A h_psi`.
    pub jacobian: DMatrix<f64>,
}

/// `y~_j = y * prod over later stages of gamma(opt) / gamma(obs)`, with a
/// zero outcome replaced by `zero_replacement` whenever a later stage exists.
pub fn pseudo_outcome_loglinear(
    y: &DVector<f64>,
    later_ratios: &[DVector<f64>],
    zero_replacement: f64,
) -> Result<DVector<f64>> {
    if let Some(v) = y.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(GestError::Domain(format!(
            "log-linear outcomes must be finite and nonnegative, got {v}"
        )));
    }
    if later_ratios.is_empty() {
        return Ok(y.clone());
    }
    if !(zero_replacement > 0.0) {
        return Err(GestError::Domain("zero_replacement must be positive".into()));
    }
    let mut out = y.map(|v| if v == 0.0 { zero_replacement } else { v });
    for (k, r) in later_ratios.iter().enumerate() {
        if r.len() != y.len() {
            return Err(GestError::Dimension(format!(
                "later-stage ratio set {k} has {} values for {} subjects",
                r.len(),
                y.len()
            )));
        }
        if let Some(bad) = r.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(GestError::Domain(format!("blip ratios must be positive, got {bad}")));
        }
        out.component_mul_assign(r);
    }
    Ok(out)
}

struct Linearization {
    eta: DVector<f64>,
    mu: DVector<f64>,
    z: DVector<f64>,
    proj: Projector,
    m: DVector<f64>,
    big_m: DMatrix<f64>,
}

struct Problem<'a> {
    y: &'a DVector<f64>,
    h_beta: &'a DMatrix<f64>,
    ah: DMatrix<f64>,
    d: &'a DVector<f64>,
    h_psi: &'a DMatrix<f64>,
}

impl Problem<'_> {
    fn eta(&self, beta: &DVector<f64>, psi: &DVector<f64>) -> DVector<f64> {
        self.h_beta * beta + &self.ah * psi
    }

    fn linearize(&self, beta: &DVector<f64>, psi: &DVector<f64>, iteration: usize) -> Result<Linearization> {
        let eta = self.eta(beta, psi);
        if let Some(e) = eta.iter().find(|e| !(e.abs() <= ETA_LIMIT)) {
            return Err(GestError::Divergence { iteration, eta: *e });
        }
        let mu = eta.map(f64::exp);
        let z = DVector::from_iterator(
            eta.len(),
            eta.iter().zip(mu.iter()).zip(self.y.iter()).map(|((e, m), y)| e + (y - m) / m),
        );
        let proj = Projector::weighted(self.h_beta, &mu).map_err(|e| GestError::Singular {
            context: "weighted treatment-free normal equations".into(),
            condition: e.condition,
        })?;
        let s = scale_rows(self.h_psi, self.d);
        let m = s.transpose() * proj.residual(&z);
        let big_m = s.transpose() * proj.residual_matrix(&self.ah);
        Ok(Linearization {
            eta,
            mu,
            z,
            proj,
            m,
            big_m,
        })
    }

    /// Raw IRLS update from a linearization.
    fn update(&self, lin: &Linearization) -> Result<(DVector<f64>, DVector<f64>)> {
        let psi = linalg::solve_square(&lin.big_m, &lin.m)
            .map_err(|e| GestError::Identifiability { condition: e.condition })?;
        let beta = lin.proj.coefficients(&(&lin.z - &self.ah * &psi));
        Ok((beta, psi))
    }

    fn residuals(&self, mu: &DVector<f64>) -> (f64, f64) {
        let r = self.y - mu;
        let ratio = self.y.component_div(mu);
        let dh = scale_rows(self.h_psi, self.d);
        let psi_eq = dh.transpose() * ratio.add_scalar(-1.0);
        let beta_eq = self.h_beta.transpose() * &r;
        let psi_scale = 1.0 + linalg::max_abs(&(dh.abs().transpose() * ratio));
        let beta_scale = 1.0 + linalg::max_abs(&(self.h_beta.transpose() * self.y));
        (linalg::max_abs(&psi_eq) / psi_scale, linalg::max_abs(&beta_eq) / beta_scale)
    }
}

/// Fits one log-linear stage. Non-convergence within `max_iter` is reported
/// through `converged = false`; numerical breakdowns are errors.
pub fn irls_stage_fit(
    y_tilde: &DVector<f64>,
    design: &DesignMatrices,
    d: &DVector<f64>,
    opts: &IrlsOptions,
) -> Result<LoglinearStageFit> {
    opts.validate()?;
    let n = design.n();
    if y_tilde.len() != n || d.len() != n || design.h_psi.nrows() != n || design.h_beta.nrows() != n {
        return Err(GestError::Dimension(format!(
            "stage inputs disagree on n: y~ {}, d {}, a {}",
            y_tilde.len(),
            d.len(),
            n
        )));
    }
    if let Some(v) = y_tilde.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(GestError::Domain(format!(
            "IRLS needs finite nonnegative pseudo-outcomes, got {v}"
        )));
    }
    let prob = Problem {
        y: y_tilde,
        h_beta: &design.h_beta,
        ah: design.a_h_psi(),
        d,
        h_psi: &design.h_psi,
    };

    let start = Projector::new(&design.h_beta).map_err(|e| GestError::Singular {
        context: "treatment-free design".into(),
        condition: e.condition,
    })?;
    let mut beta = start.coefficients(&y_tilde.map(|v| (v + 0.5).ln()));
    let mut psi = DVector::zeros(design.h_psi.ncols());
    let mut eta = prob.eta(&beta, &psi);

    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let lin = prob.linearize(&beta, &psi, it)?;
        let (raw_beta, raw_psi) = prob.update(&lin)?;
        if opts.damping {
            beta = (raw_beta + &beta) * 0.5;
            psi = (raw_psi + &psi) * 0.5;
        } else {
            beta = raw_beta;
            psi = raw_psi;
        }
        let next = prob.eta(&beta, &psi);
        let change = linalg::max_abs(&(&next - &eta));
        eta = next;
        if change < opts.eps_eta {
            converged = true;
            break;
        }
    }

    let mut polish_iterations = 0;
    if converged {
        converged = polish(&prob, &mut beta, &mut psi, &mut polish_iterations);
    }

    let lin = prob.linearize(&beta, &psi, iterations + polish_iterations)?;
    let (ee_residual, beta_ee_residual) = prob.residuals(&lin.mu);
    let q_at_psi_hat = linalg::quadratic_q(&psi, &lin.m, &lin.big_m);
    let ratio = y_tilde.component_div(&lin.mu);
    let jacobian = scale_rows(&design.h_psi, &d.component_mul(&ratio)).transpose() * lin.proj.residual_matrix(&prob.ah);
    Ok(LoglinearStageFit {
        psi,
        beta,
        w: lin.mu.clone(),
        eta: lin.eta,
        mu: lin.mu,
        z: lin.z,
        d: d.clone(),
        y_tilde: y_tilde.clone(),
        converged,
        iterations,
        polish_iterations,
        ee_residual,
        beta_ee_residual,
        q_at_psi_hat,
        m_tilde: lin.m,
        big_m_tilde: lin.big_m,
        jacobian,
    })
}

/// Undamped Newton steps from an eta-converged iterate; falls back to halved
/// steps if a full step fails to reduce the residual.
fn polish(prob: &Problem<'_>, beta: &mut DVector<f64>, psi: &mut DVector<f64>, count: &mut usize) -> bool {
    let resid_at = |b: &DVector<f64>, p: &DVector<f64>| -> Option<f64> {
        let eta = prob.eta(b, p);
        if eta.iter().any(|e| !(e.abs() <= ETA_LIMIT)) {
            return None;
        }
        let (r1, r2) = prob.residuals(&eta.map(f64::exp));
        Some(r1.max(r2))
    };
    let Some(mut current) = resid_at(beta, psi) else {
        return false;
    };
    for _ in 0..POLISH_MAX_ITER {
        if current <= POLISH_TOL {
            break;
        }
        *count += 1;
        let Ok(lin) = prob.linearize(beta, psi, *count) else {
            break;
        };
        let Ok((raw_beta, raw_psi)) = prob.update(&lin) else {
            break;
        };
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..20 {
            let b = &*beta + (&raw_beta - &*beta) * step;
            let p = &*psi + (&raw_psi - &*psi) * step;
            if let Some(r) = resid_at(&b, &p) {
                if r < current {
                    *beta = b;
                    *psi = p;
                    current = r;
                    improved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    current <= FIXED_POINT_TOL
}

/// Quasi-likelihood at the solution from the final quadratic approximation.
pub fn quasi_likelihood_loglinear(fit: &LoglinearStageFit) -> Result<f64> {
    if !fit.converged {
        return Err(GestError::State(
            "quasi-likelihood requested for a non-converged IRLS fit".into(),
        ));
    }
    Ok(linalg::quadratic_q(&fit.psi, &fit.m_tilde, &fit.big_m_tilde))
}
