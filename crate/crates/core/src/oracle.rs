//! Centralized reference solvers used by tests and the baseline mode.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::ocp::{CouplingMap, LinearizedSubproblem, LocalOcp, OcpError, StageContext};
use crate::qp::{qp_solve_stacked, split_stacked, QpError, QpProblem, QpSolution};
use crate::riccati::{feedback_gain, solve_dare, RiccatiError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error("closed loop is not stable (spectral radius {0})")]
    Unstable(f64),
    #[error("{0}")]
    Invalid(String),
}

/// Solves a small QP by enumerating every subset of inequality rows and
/// keeping the KKT point with the lowest objective. Exponential in the
/// number of inequalities; meant for cross-checking on tiny instances.
pub fn enumerate_qp(p: &QpProblem) -> Result<Option<Vec<f64>>, OracleError> {
    let m = p.ineq_rhs.len();
    if m > 16 {
        return Err(OracleError::Invalid(format!("{m} inequality rows is too many to enumerate")));
    }
    let n = p.dim();
    let me = p.eq_rhs.len();
    let h = p.hessian.to_dense();
    let a = p.eq_matrix.to_dense();
    let c = p.ineq_matrix.to_dense();
    let feas_tol = 1e-9 * (1.0 + p.ineq_rhs.iter().fold(0.0f64, |acc, v| acc.max(v.abs())));
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1u32 << m) {
        let working: Vec<usize> = (0..m).filter(|r| mask & (1 << r) != 0).collect();
        let dim = n + me + working.len();
        let mut k = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = nalgebra::DVector::<f64>::zeros(dim);
        k.view_mut((0, 0), (n, n)).copy_from(&h);
        for i in 0..n {
            rhs[i] = -p.linear[i];
        }
        for r in 0..me {
            for j in 0..n {
                k[(n + r, j)] = a[(r, j)];
                k[(j, n + r)] = a[(r, j)];
            }
            rhs[n + r] = p.eq_rhs[r];
        }
        for (w, &r) in working.iter().enumerate() {
            for j in 0..n {
                k[(n + me + w, j)] = c[(r, j)];
                k[(j, n + me + w)] = c[(r, j)];
            }
            rhs[n + me + w] = p.ineq_rhs[r];
        }
        let Some(sol) = k.lu().solve(&rhs) else { continue };
        if !sol.iter().all(|v| v.is_finite()) {
            continue;
        }
        let z: Vec<f64> = sol.rows(0, n).iter().copied().collect();
        if working.iter().enumerate().any(|(w, _)| sol[n + me + w] < -1e-9) {
            continue;
        }
        let cz = p.ineq_matrix.mul_vec(&z);
        if cz.iter().zip(&p.ineq_rhs).any(|(l, r)| l - r > feas_tol) {
            continue;
        }
        let az = p.eq_matrix.mul_vec(&z);
        if az.iter().zip(&p.eq_rhs).any(|(l, r)| (l - r).abs() > feas_tol.max(1e-9)) {
            continue;
        }
        let obj = p.objective(&z);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, z));
        }
    }
    Ok(best.map(|(_, z)| z))
}

/// Stacked solve of the consensus QP built from every agent's linearization.
pub fn centralized_qp(subproblems: &[LinearizedSubproblem], coupling: &CouplingMap, tol: f64) -> Result<QpSolution, OracleError> {
    if subproblems.len() != coupling.agent_count() {
        return Err(OracleError::Invalid("one subproblem per agent expected".into()));
    }
    let problems: Vec<QpProblem> = subproblems.iter().map(|s| s.to_qp()).collect();
    Ok(qp_solve_stacked(&problems, coupling, tol)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpResult {
    /// Converged decision vector of each agent.
    pub iterates: Vec<Vec<f64>>,
    pub iterations: usize,
    /// `‖z^{k+1} − z^k‖∞` of the last iteration.
    pub step_norm: f64,
    pub converged: bool,
}

/// Full-step SQP with Gauss-Newton Hessians on the stacked problem, run
/// until the step norm drops below `tol` or `max_iter` is reached.
pub fn centralized_sqp(
    ocps: &[LocalOcp],
    contexts: &[StageContext],
    initial: Vec<Vec<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<SqpResult, OracleError> {
    if ocps.len() != contexts.len() || ocps.len() != initial.len() {
        return Err(OracleError::Invalid("agent counts differ".into()));
    }
    let coupling = CouplingMap::new(ocps.iter().map(|o| o.layout().clone()).collect());
    let mut z = initial;
    let mut step_norm = f64::INFINITY;
    for it in 1..=max_iter {
        let subs = ocps
            .iter()
            .zip(contexts)
            .zip(&z)
            .map(|((o, c), zi)| o.evaluate(c, zi))
            .collect::<Result<Vec<_>, _>>()?;
        let sol = centralized_qp(&subs, &coupling, 1e-10)?;
        let next = split_stacked(&sol.primal, &coupling);
        step_norm = next.iter().flatten().zip(z.iter().flatten()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        z = next;
        if step_norm <= tol {
            return Ok(SqpResult { iterates: z, iterations: it, step_norm, converged: true });
        }
    }
    Ok(SqpResult { iterates: z, iterations: max_iter, step_norm, converged: false })
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().fold(0.0f64, |acc, l| acc.max(l.norm()))
}

/// Infinite-horizon LQR gain `K` with `u = −Kx`; errors unless `A − BK` is
/// Schur stable.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, OracleError> {
    let p = solve_dare(a, b, q, r)?;
    let k = feedback_gain(a, b, &p, r).ok_or_else(|| OracleError::Invalid("singular gain system".into()))?;
    let radius = spectral_radius(&(a - b * &k));
    if radius >= 1.0 {
        return Err(OracleError::Unstable(radius));
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgentModel, CouplingGraph};
    use crate::ocp::{default_base_weight, default_input_weight};
    use crate::sparse::CsrMatrix;

    fn dm(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn scalar_lqr_gain_is_inverse_golden_ratio() {
        let one = dm(1, 1, &[1.0]);
        let k = lqr_gain(&one, &one, &one, &one).unwrap();
        let p = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((k[(0, 0)] - p / (1.0 + p)).abs() < 1e-12);
        assert!((k[(0, 0)] - 0.618).abs() < 1e-3);
    }

    #[test]
    fn default_weights_stabilize_each_agent() {
        let _ = CouplingGraph::path(4).unwrap();
        let model = AgentModel::new(0.05).unwrap();
        let a = DMatrix::from_column_slice(6, 6, model.a.as_slice());
        let b = DMatrix::from_column_slice(6, 3, model.b.as_slice());
        let q = DMatrix::from_column_slice(6, 6, default_base_weight().as_slice());
        let r = DMatrix::from_column_slice(3, 3, default_input_weight().as_slice());
        let k = lqr_gain(&a, &b, &q, &r).unwrap();
        assert!(spectral_radius(&(&a - &b * &k)) < 1.0);
        let k2 = lqr_gain(&a, &b, &(q * 7.5), &(r * 7.5)).unwrap();
        assert!((k - k2).abs().max() < 1e-9);
    }

    #[test]
    fn unstabilizable_system_is_rejected() {
        let a = dm(2, 2, &[1.2, 0.0, 0.0, 0.5]);
        let b = dm(2, 1, &[0.0, 1.0]);
        assert!(lqr_gain(&a, &b, &DMatrix::identity(2, 2), &dm(1, 1, &[1.0])).is_err());
    }

    #[test]
    fn enumeration_finds_box_projection() {
        // min ½‖z − (2, −3)‖² s.t. −1 ≤ z ≤ 1
        let p = QpProblem {
            hessian: CsrMatrix::identity(2, 1.0),
            linear: vec![-2.0, 3.0],
            eq_matrix: CsrMatrix::zeros(0, 2),
            eq_rhs: vec![],
            ineq_matrix: CsrMatrix::from_dense(&dm(4, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0])),
            ineq_rhs: vec![1.0; 4],
        };
        let z = enumerate_qp(&p).unwrap().unwrap();
        assert!((z[0] - 1.0).abs() < 1e-12 && (z[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_reports_infeasibility() {
        let p = QpProblem {
            hessian: CsrMatrix::identity(1, 1.0),
            linear: vec![0.0],
            eq_matrix: CsrMatrix::zeros(0, 1),
            eq_rhs: vec![],
            ineq_matrix: CsrMatrix::from_dense(&dm(2, 1, &[1.0, -1.0])),
            ineq_rhs: vec![-1.0, -1.0],
        };
        assert_eq!(enumerate_qp(&p).unwrap(), None);
    }
}
