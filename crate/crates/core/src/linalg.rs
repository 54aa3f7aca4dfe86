//! Small dense linear-algebra helpers shared by the estimators.
//!
//! Every square solve goes through [`solve_square`], which refuses systems
//! whose 2-norm condition number exceeds [`CONDITION_LIMIT`]. Least-squares
//! projections go through [`Projector`], which keeps a thin Householder QR of
//! the (optionally row-weighted) design so residual-maker products never
//! form the n x n hat matrix.

use nalgebra::{DMatrix, DVector};

/// Relative condition number above which a system is treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Failure of a guarded solve; carries the offending condition number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IllConditioned {
    pub condition: f64,
}

/// 2-norm condition number from singular values. Returns infinity for a
/// matrix with a zero singular value (or no columns).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return f64::INFINITY;
    }
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solve a square system with column-pivoted QR after a conditioning check.
pub fn solve_square(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, IllConditioned> {
    assert_eq!(m.nrows(), m.ncols(), "solve_square needs a square matrix");
    assert_eq!(m.nrows(), rhs.len(), "solve_square: rhs length mismatch");
    let condition = condition_number(m);
    if !(condition <= CONDITION_LIMIT) {
        return Err(IllConditioned { condition });
    }
    m.clone()
        .col_piv_qr()
        .solve(rhs)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or(IllConditioned { condition })
}

/// Inverse of a square matrix, with the same conditioning guard.
pub fn inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, IllConditioned> {
    let condition = condition_number(m);
    if !(condition <= CONDITION_LIMIT) {
        return Err(IllConditioned { condition });
    }
    m.clone()
        .col_piv_qr()
        .try_inverse()
        .ok_or(IllConditioned { condition })
}

/// Least-squares projection onto the column space of a design matrix,
/// optionally under positive row weights.
///
/// With weights `w`, the projection is `P_w = X (X' W X)^-1 X' W`, computed by
/// factoring `diag(sqrt w) X`.
#[derive(Debug, Clone)]
pub struct Projector {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    sqrt_w: Option<DVector<f64>>,
}

impl Projector {
    pub fn new(x: &DMatrix<f64>) -> Result<Self, IllConditioned> {
        Self::build(x.clone(), None)
    }

    pub fn weighted(x: &DMatrix<f64>, w: &DVector<f64>) -> Result<Self, IllConditioned> {
        assert_eq!(x.nrows(), w.len());
        let sqrt_w = w.map(f64::sqrt);
        let mut xw = x.clone();
        for (mut row, s) in xw.row_iter_mut().zip(sqrt_w.iter()) {
            row *= *s;
        }
        Self::build(xw, Some(sqrt_w))
    }

    fn build(x: DMatrix<f64>, sqrt_w: Option<DVector<f64>>) -> Result<Self, IllConditioned> {
        if x.ncols() == 0 {
            return Ok(Projector {
                q: DMatrix::zeros(x.nrows(), 0),
                r: DMatrix::zeros(0, 0),
                sqrt_w,
            });
        }
        if x.nrows() < x.ncols() {
            return Err(IllConditioned {
                condition: f64::INFINITY,
            });
        }
        let qr = x.qr();
        let r = qr.r();
        let condition = condition_number(&r);
        if !(condition <= CONDITION_LIMIT) {
            return Err(IllConditioned { condition });
        }
        Ok(Projector {
            q: qr.q(),
            r,
            sqrt_w,
        })
    }

    pub fn ncols(&self) -> usize {
        self.r.ncols()
    }

    /// `(I - P) v`.
    pub fn residual(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.sqrt_w {
            None => v - &self.q * (self.q.transpose() * v),
            Some(s) => {
                let vw = v.component_mul(s);
                let rw = &vw - &self.q * (self.q.transpose() * &vw);
                rw.component_div(s)
            }
        }
    }

    /// `(I - P) M`, column by column.
    pub fn residual_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for (j, col) in m.column_iter().enumerate() {
            out.set_column(j, &self.residual(&col.into_owned()));
        }
        out
    }

    /// Least-squares coefficients `b` with `P v = X b`.
    pub fn coefficients(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.r.ncols() == 0 {
            return DVector::zeros(0);
        }
        let qtv = match &self.sqrt_w {
            None => self.q.transpose() * v,
            Some(s) => self.q.transpose() * v.component_mul(s),
        };
        self.r
            .solve_upper_triangular(&qtv)
            .expect("R is nonsingular after the conditioning check")
    }
}

pub(crate) fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Quadratic form `x' m - 0.5 x' M x`, shared by every quasi-likelihood.
pub(crate) fn quadratic_q(x: &DVector<f64>, m: &DVector<f64>, big_m: &DMatrix<f64>) -> f64 {
    x.dot(m) - 0.5 * x.dot(&(big_m * x))
}
