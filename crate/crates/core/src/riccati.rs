//! Discrete algebraic Riccati equation via the structured doubling algorithm.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("R is not positive definite")]
    InputWeightNotPd,
    #[error("doubling iteration hit a singular matrix at step {0}")]
    Singular(usize),
    #[error("no convergence after {0} doubling steps")]
    NoConvergence(usize),
}

const MAX_DOUBLINGS: usize = 200;

/// Solves `P = AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA + Q` for the stabilizing
/// (maximal) solution.
pub fn solve_dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, RiccatiError> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(RiccatiError::Dimension(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let r_inv = r.clone().cholesky().ok_or(RiccatiError::InputWeightNotPd)?.inverse();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * &r_inv * b.transpose();
    let mut hk = q.clone();
    for step in 0..MAX_DOUBLINGS {
        let w = (&eye + &gk * &hk).try_inverse().ok_or(RiccatiError::Singular(step))?;
        let a_next = &ak * &w * &ak;
        let g_next = &gk + &ak * &w * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w * &ak;
        let h_next = 0.5 * (&h_next + h_next.transpose());
        let change = (&h_next - &hk).amax();
        let scale = h_next.amax().max(1.0);
        ak = a_next;
        gk = 0.5 * (&g_next + g_next.transpose());
        hk = h_next;
        if !hk.iter().all(|v| v.is_finite()) {
            return Err(RiccatiError::Singular(step));
        }
        if change <= 1e-13 * scale {
            return Ok(hk);
        }
    }
    Err(RiccatiError::NoConvergence(MAX_DOUBLINGS))
}

/// `K = (R + BᵀPB)⁻¹ BᵀPA` so that `u = −K x`.
pub fn feedback_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, p: &DMatrix<f64>, r: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let s = r + b.transpose() * p * b;
    let rhs = b.transpose() * p * a;
    s.cholesky().map(|c| c.solve(&rhs))
}

/// Residual of the Riccati equation, used to certify solutions.
pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let s = r + b.transpose() * p * b;
    let Some(s_inv) = s.try_inverse() else {
        return f64::INFINITY;
    };
    let bpa = b.transpose() * p * a;
    let rhs = a.transpose() * p * a - bpa.transpose() * s_inv * &bpa + q;
    (rhs - p).amax()
}
