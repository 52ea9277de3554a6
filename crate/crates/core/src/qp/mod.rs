//! Sparse convex QP solver.
//!
//! Problems have the form `min ½zᵀPz + qᵀz  s.t.  Az = b,  Cz ≤ d` with the
//! sign convention `Pz + q + Aᵀλ + Cᵀμ = 0`, `μ ≥ 0` at a KKT point.
//!
//! The solver runs a primal-dual active-set iteration on regularized KKT
//! systems, starting from the warm start's active set. Factorizations are
//! cached per working set while the matrices stay unchanged. If the
//! active-set iteration stalls, an operator-splitting method produces an
//! active-set guess that is then polished the same way.

mod kkt;
mod splitting;

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ocp::CouplingMap;
use crate::sparse::{inf_norm, CsrMatrix, FactorError, Triplets};

use kkt::{solve_eqp, KktCache};
use splitting::Splitting;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite problem data in {0}")]
    NonFinite(&'static str),
    #[error("equality constraints are inconsistent (residual {0:e})")]
    InfeasibleEqualities(f64),
    #[error("factorization failed: {0}")]
    Factorization(#[from] FactorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Symmetric, both triangles stored.
    pub hessian: CsrMatrix,
    pub linear: Vec<f64>,
    pub eq_matrix: CsrMatrix,
    pub eq_rhs: Vec<f64>,
    pub ineq_matrix: CsrMatrix,
    pub ineq_rhs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    /// Iteration budget exhausted; the best iterate is returned.
    Inaccurate,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.primal <= tol && self.dual <= tol && self.complementarity <= tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub primal: Vec<f64>,
    pub eq_dual: Vec<f64>,
    pub ineq_dual: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub residuals: KktResiduals,
}

impl QpSolution {
    /// Inequality rows with a positive multiplier.
    pub fn active_set(&self) -> Vec<usize> {
        self.ineq_dual.iter().enumerate().filter(|(_, &m)| m > 0.0).map(|(r, _)| r).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub tol: f64,
    /// Cap on operator-splitting iterations in the fallback path.
    pub max_iter: usize,
    pub active_set_iterations: usize,
    pub polish_every: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 4000, active_set_iterations: 40, polish_every: 50 }
    }
}

impl QpSettings {
    pub fn in_loop() -> Self {
        Self { tol: 1e-6, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SolverStats {
    pub solves: usize,
    pub factorizations: usize,
    pub cache_hits: usize,
    pub active_set_iterations: usize,
    pub fallbacks: usize,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        let shape = |m: &CsrMatrix, rows: usize, what: &str| {
            if m.ncols() != n || m.nrows() != rows {
                Err(QpError::Dimension(format!("{what} is {}x{}, expected {rows}x{n}", m.nrows(), m.ncols())))
            } else {
                Ok(())
            }
        };
        shape(&self.hessian, n, "hessian")?;
        shape(&self.eq_matrix, self.eq_rhs.len(), "equality matrix")?;
        shape(&self.ineq_matrix, self.ineq_rhs.len(), "inequality matrix")?;
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !self.hessian.is_finite() {
            return Err(QpError::NonFinite("hessian"));
        }
        if !finite(&self.linear) {
            return Err(QpError::NonFinite("linear term"));
        }
        if !self.eq_matrix.is_finite() || !finite(&self.eq_rhs) {
            return Err(QpError::NonFinite("equality constraints"));
        }
        if !self.ineq_matrix.is_finite() || !finite(&self.ineq_rhs) {
            return Err(QpError::NonFinite("inequality constraints"));
        }
        Ok(())
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let pz = self.hessian.mul_vec(z);
        z.iter().zip(&pz).map(|(a, b)| 0.5 * a * b).sum::<f64>() + z.iter().zip(&self.linear).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn kkt_residuals(&self, z: &[f64], eq_dual: &[f64], ineq_dual: &[f64]) -> KktResiduals {
        let az = self.eq_matrix.mul_vec(z);
        let cz = self.ineq_matrix.mul_vec(z);
        let eq = az.iter().zip(&self.eq_rhs).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let ineq = cz.iter().zip(&self.ineq_rhs).fold(0.0f64, |m, (a, b)| m.max(a - b));
        let mut grad = self.hessian.mul_vec(z);
        for (g, q) in grad.iter_mut().zip(&self.linear) {
            *g += q;
        }
        self.eq_matrix.tr_mul_add(eq_dual, &mut grad);
        self.ineq_matrix.tr_mul_add(ineq_dual, &mut grad);
        let sign = ineq_dual.iter().fold(0.0f64, |m, &v| m.max(-v));
        let comp = ineq_dual.iter().zip(cz.iter().zip(&self.ineq_rhs)).fold(0.0f64, |m, (mu, (a, b))| m.max((mu * (a - b)).abs()));
        KktResiduals { primal: eq.max(ineq), dual: inf_norm(&grad).max(sign), complementarity: comp }
    }

    /// Writes the problem as a sequence of matrix-market blocks, each
    /// preceded by a `% name` comment: `hessian`, `linear`, `eq_matrix`,
    /// `eq_rhs`, `ineq_matrix`, `ineq_rhs`. Indices are 1-based.
    pub fn write_matrix_market<W: Write>(&self, mut out: W) -> io::Result<()> {
        let matrix = |out: &mut W, name: &str, m: &CsrMatrix| -> io::Result<()> {
            writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
            writeln!(out, "% {name}")?;
            writeln!(out, "{} {} {}", m.nrows(), m.ncols(), m.nnz())?;
            for (r, c, v) in m.triplets() {
                writeln!(out, "{} {} {:e}", r + 1, c + 1, v)?;
            }
            Ok(())
        };
        let vector = |out: &mut W, name: &str, v: &[f64]| -> io::Result<()> {
            writeln!(out, "%%MatrixMarket matrix array real general")?;
            writeln!(out, "% {name}")?;
            writeln!(out, "{} 1", v.len())?;
            for x in v {
                writeln!(out, "{x:e}")?;
            }
            Ok(())
        };
        matrix(&mut out, "hessian", &self.hessian)?;
        vector(&mut out, "linear", &self.linear)?;
        matrix(&mut out, "eq_matrix", &self.eq_matrix)?;
        vector(&mut out, "eq_rhs", &self.eq_rhs)?;
        matrix(&mut out, "ineq_matrix", &self.ineq_matrix)?;
        vector(&mut out, "ineq_rhs", &self.ineq_rhs)
    }
}

/// Reusable solver; keeps factorizations across calls with identical matrices.
#[derive(Debug, Default)]
pub struct QpSolver {
    settings: QpSettings,
    matrices: Option<(CsrMatrix, CsrMatrix, CsrMatrix)>,
    cache: KktCache,
    stats: SolverStats,
}

enum ActiveSetOutcome {
    Certified(QpSolution),
    Failed,
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings, ..Self::default() }
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    pub fn stats(&self) -> SolverStats {
        SolverStats { factorizations: self.cache.factorizations + self.stats.factorizations, cache_hits: self.cache.hits, ..self.stats }
    }

    fn sync_matrices(&mut self, p: &QpProblem) {
        let same = self
            .matrices
            .as_ref()
            .is_some_and(|(h, a, c)| h.same_as(&p.hessian) && a.same_as(&p.eq_matrix) && c.same_as(&p.ineq_matrix));
        if !same {
            self.cache.clear();
            self.matrices = Some((p.hessian.clone(), p.eq_matrix.clone(), p.ineq_matrix.clone()));
        }
    }

    pub fn solve(&mut self, p: &QpProblem, warm: Option<&QpSolution>) -> Result<QpSolution, QpError> {
        p.validate()?;
        self.sync_matrices(p);
        self.stats.solves += 1;
        let warm = warm.filter(|w| w.primal.len() == p.dim() && w.ineq_dual.len() == p.ineq_rhs.len() && w.eq_dual.len() == p.eq_rhs.len());
        let start = warm.map(QpSolution::active_set).unwrap_or_default();
        let mut iterations = 0;
        if let ActiveSetOutcome::Certified(sol) = self.active_set(p, start, self.settings.active_set_iterations, &mut iterations) {
            return Ok(sol);
        }

        self.stats.fallbacks += 1;
        let mut split = Splitting::new(p, warm)?;
        let mut polished_at = Vec::new();
        while split.iterations < self.settings.max_iter {
            let (rp, rd) = split.iterate(self.settings.polish_every)?;
            let guess = split.active_guess();
            let converged = rp <= self.settings.tol && rd <= self.settings.tol;
            if polished_at != guess || converged {
                let mut polish_iters = 0;
                let outcome = self.active_set(p, guess.clone(), 10, &mut polish_iters);
                iterations += polish_iters;
                if let ActiveSetOutcome::Certified(mut sol) = outcome {
                    sol.iterations = iterations + split.iterations;
                    self.stats.factorizations += split.factorizations;
                    return Ok(sol);
                }
                polished_at = guess;
            }
            if converged {
                break;
            }
        }
        self.stats.factorizations += split.factorizations;
        let (eq_dual, ineq_dual) = split.split_dual();
        let residuals = p.kkt_residuals(&split.x, &eq_dual, &ineq_dual);
        let status = if residuals.within(self.settings.tol) { QpStatus::Solved } else { QpStatus::Inaccurate };
        if status == QpStatus::Inaccurate {
            self.check_equalities(p)?;
        }
        Ok(QpSolution { primal: split.x.clone(), eq_dual, ineq_dual, status, iterations: iterations + split.iterations, residuals })
    }

    fn check_equalities(&mut self, p: &QpProblem) -> Result<(), QpError> {
        let eqp = solve_eqp(p, &[], &mut self.cache)?;
        let az = p.eq_matrix.mul_vec(&eqp.primal);
        let res = az.iter().zip(&p.eq_rhs).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if res > 1e-6 * (1.0 + inf_norm(&p.eq_rhs)) {
            return Err(QpError::InfeasibleEqualities(res));
        }
        Ok(())
    }

    fn active_set(&mut self, p: &QpProblem, start: Vec<usize>, max_iter: usize, iterations: &mut usize) -> ActiveSetOutcome {
        let mi = p.ineq_rhs.len();
        let mut working = start;
        let mut history: Vec<Vec<usize>> = Vec::new();
        let eps_p = 1e-12 * (1.0 + inf_norm(&p.ineq_rhs));
        let eps_d = 1e-12 * (1.0 + inf_norm(&p.linear));
        for _ in 0..max_iter {
            *iterations += 1;
            self.stats.active_set_iterations += 1;
            let Ok(eqp) = solve_eqp(p, &working, &mut self.cache) else {
                return ActiveSetOutcome::Failed;
            };
            if !eqp.primal.iter().all(|v| v.is_finite()) {
                return ActiveSetOutcome::Failed;
            }
            let mut mu = vec![0.0; mi];
            let mut in_set = vec![false; mi];
            for (k, &r) in working.iter().enumerate() {
                mu[r] = eqp.working_dual[k];
                in_set[r] = true;
            }
            let cz = p.ineq_matrix.mul_vec(&eqp.primal);
            let next: Vec<usize> = (0..mi)
                .filter(|&r| if in_set[r] { mu[r] >= -eps_d } else { cz[r] - p.ineq_rhs[r] > eps_p })
                .collect();
            if next == working {
                for m in &mut mu {
                    *m = m.max(0.0);
                }
                let residuals = p.kkt_residuals(&eqp.primal, &eqp.eq_dual, &mu);
                if !residuals.within(self.settings.tol) {
                    return ActiveSetOutcome::Failed;
                }
                return ActiveSetOutcome::Certified(QpSolution {
                    primal: eqp.primal,
                    eq_dual: eqp.eq_dual,
                    ineq_dual: mu,
                    status: QpStatus::Solved,
                    iterations: *iterations,
                    residuals,
                });
            }
            if history.contains(&next) {
                return ActiveSetOutcome::Failed;
            }
            history.push(std::mem::replace(&mut working, next));
        }
        ActiveSetOutcome::Failed
    }
}

pub fn qp_solve(p: &QpProblem, warm: Option<&QpSolution>, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    QpSolver::new(QpSettings { tol, max_iter, ..QpSettings::default() }).solve(p, warm)
}

/// Concatenates per-agent problems and appends the consensus rows
/// `w_ji − x_j = 0` of `coupling`.
pub fn stack_problems(problems: &[QpProblem], coupling: &CouplingMap) -> Result<QpProblem, QpError> {
    if problems.len() != coupling.agent_count() {
        return Err(QpError::Dimension(format!("{} problems for {} agents", problems.len(), coupling.agent_count())));
    }
    for (i, (p, l)) in problems.iter().zip(coupling.layouts()).enumerate() {
        if p.dim() != l.len() {
            return Err(QpError::Dimension(format!("agent {i}: problem has {} variables, layout {}", p.dim(), l.len())));
        }
    }
    let n: usize = problems.iter().map(QpProblem::dim).sum();
    let me: usize = problems.iter().map(|p| p.eq_rhs.len()).sum();
    let mi: usize = problems.iter().map(|p| p.ineq_rhs.len()).sum();
    let nc = coupling.row_count();
    let mut h = Triplets::new(n, n);
    let mut a = Triplets::new(me + nc, n);
    let mut c = Triplets::new(mi, n);
    let (mut linear, mut eq_rhs, mut ineq_rhs) = (Vec::with_capacity(n), Vec::with_capacity(me + nc), Vec::with_capacity(mi));
    let (mut col, mut erow, mut irow) = (0, 0, 0);
    for p in problems {
        for (r, cc, v) in p.hessian.triplets() {
            h.push(col + r, col + cc, v);
        }
        for (r, cc, v) in p.eq_matrix.triplets() {
            a.push(erow + r, col + cc, v);
        }
        for (r, cc, v) in p.ineq_matrix.triplets() {
            c.push(irow + r, col + cc, v);
        }
        linear.extend_from_slice(&p.linear);
        eq_rhs.extend_from_slice(&p.eq_rhs);
        ineq_rhs.extend_from_slice(&p.ineq_rhs);
        col += p.dim();
        erow += p.eq_rhs.len();
        irow += p.ineq_rhs.len();
    }
    coupling.for_each_row(|row, copy, own| {
        a.push(me + row, copy, 1.0);
        a.push(me + row, own, -1.0);
    });
    eq_rhs.extend(std::iter::repeat_n(0.0, nc));
    Ok(QpProblem { hessian: h.build(), linear, eq_matrix: a.build(), eq_rhs, ineq_matrix: c.build(), ineq_rhs })
}

/// Solves the stacked consensus QP; the primal is the concatenation of the
/// agents' decision vectors in agent order.
pub fn qp_solve_stacked(problems: &[QpProblem], coupling: &CouplingMap, tol: f64) -> Result<QpSolution, QpError> {
    let stacked = stack_problems(problems, coupling)?;
    qp_solve(&stacked, None, tol, QpSettings::default().max_iter)
}

/// Splits a stacked vector into per-agent blocks.
pub fn split_stacked(z: &[f64], coupling: &CouplingMap) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(coupling.agent_count());
    let mut offset = 0;
    for l in coupling.layouts() {
        out.push(z[offset..offset + l.len()].to_vec());
        offset += l.len();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn dense_problem(h: &DMatrix<f64>, q: &[f64], a: &DMatrix<f64>, b: &[f64], c: &DMatrix<f64>, d: &[f64]) -> QpProblem {
        QpProblem {
            hessian: CsrMatrix::from_dense(h),
            linear: q.to_vec(),
            eq_matrix: CsrMatrix::from_dense(a),
            eq_rhs: b.to_vec(),
            ineq_matrix: CsrMatrix::from_dense(c),
            ineq_rhs: d.to_vec(),
        }
    }

    #[test]
    fn projection_onto_lower_bound() {
        let n = 3;
        let p = dense_problem(&DMatrix::identity(n, n), &[0.0; 3], &DMatrix::zeros(0, n), &[], &(-DMatrix::identity(n, n)), &[-1.0; 3]);
        let s = qp_solve(&p, None, 1e-10, 1000).unwrap();
        assert_eq!(s.status, QpStatus::Solved);
        for v in &s.primal {
            assert!((v - 1.0).abs() < 1e-10);
        }
        for m in &s.ineq_dual {
            assert!((m - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_equality_multiplier() {
        let p = dense_problem(&DMatrix::identity(2, 2), &[0.0, 0.0], &DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), &[2.0], &DMatrix::zeros(0, 2), &[]);
        let s = qp_solve(&p, None, 1e-10, 1000).unwrap();
        assert!((s.primal[0] - 1.0).abs() < 1e-12 && (s.primal[1] - 1.0).abs() < 1e-12);
        assert!((s.eq_dual[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_equalities_are_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = dense_problem(&DMatrix::identity(2, 2), &[0.0, 0.0], &a, &[1.0, 2.0], &DMatrix::zeros(0, 2), &[]);
        assert!(matches!(qp_solve(&p, None, 1e-8, 200), Err(QpError::InfeasibleEqualities(_))));
    }

    #[test]
    fn validates_dimensions_and_values() {
        let mut p = dense_problem(&DMatrix::identity(2, 2), &[0.0, 0.0], &DMatrix::zeros(0, 2), &[], &DMatrix::zeros(0, 2), &[]);
        p.linear[1] = f64::NAN;
        assert_eq!(qp_solve(&p, None, 1e-8, 10), Err(QpError::NonFinite("linear term")));
        p.linear = vec![0.0; 3];
        assert!(matches!(qp_solve(&p, None, 1e-8, 10), Err(QpError::Dimension(_))));
    }

    fn random_qp(rng: &mut ChaCha8Rng, n: usize, me: usize, mi: usize) -> QpProblem {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.1;
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = DMatrix::from_fn(me, n, |_, _| rng.random_range(-1.0..1.0));
        let b: Vec<f64> = (0..me).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = DMatrix::from_fn(mi, n, |_, _| rng.random_range(-1.0..1.0));
        // keep the origin strictly feasible for the inequalities
        let x0 = a.clone().pseudo_inverse(1e-12).unwrap() * DVector::from_vec(b.clone());
        let cx = &c * &x0;
        let d: Vec<f64> = (0..mi).map(|r| cx[r] + rng.random_range(-0.5f64..1.0).max(0.05)).collect();
        dense_problem(&h, &q, &a, &b, &c, &d)
    }

    #[test]
    fn warm_start_does_not_change_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let p = random_qp(&mut rng, 15, 3, 10);
            let cold = qp_solve(&p, None, 1e-9, 4000).unwrap();
            let mut perturbed = p.clone();
            perturbed.linear[0] += 0.5;
            let other = qp_solve(&perturbed, None, 1e-9, 4000).unwrap();
            let warm = qp_solve(&p, Some(&other), 1e-9, 4000).unwrap();
            let d = cold.primal.iter().zip(&warm.primal).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(d < 1e-8);
        }
    }

    #[test]
    fn objective_scaling_keeps_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let p = random_qp(&mut rng, 12, 2, 8);
            let s = qp_solve(&p, None, 1e-9, 4000).unwrap();
            let mut scaled = p.clone();
            scaled.hessian = scaled.hessian.scaled(&vec![7.5; 12], &vec![1.0; 12]);
            scaled.linear.iter_mut().for_each(|v| *v *= 7.5);
            let t = qp_solve(&scaled, None, 1e-9, 4000).unwrap();
            let d = s.primal.iter().zip(&t.primal).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(d < 1e-8);
        }
    }

    #[test]
    fn solver_reuses_factorizations() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let p = random_qp(&mut rng, 10, 2, 6);
        let mut solver = QpSolver::new(QpSettings::default());
        let first = solver.solve(&p, None).unwrap();
        let before = solver.stats().factorizations;
        let again = solver.solve(&p, Some(&first)).unwrap();
        assert_eq!(solver.stats().factorizations, before);
        assert_eq!(first.primal, again.primal);
    }

    #[test]
    fn matrix_market_dump_lists_all_blocks() {
        let p = dense_problem(&DMatrix::identity(2, 2), &[1.0, 0.0], &DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), &[2.0], &DMatrix::zeros(0, 2), &[]);
        let mut buf = Vec::new();
        p.write_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for name in ["hessian", "linear", "eq_matrix", "eq_rhs", "ineq_matrix", "ineq_rhs"] {
            assert!(text.contains(&format!("% {name}\n")), "{name}");
        }
        assert!(text.contains("2 2 2\n1 1 1e0\n2 2 1e0\n"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn problem(seed: u64, n: usize, me: usize, mi: usize) -> QpProblem {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut gauss = |r: usize, c: usize| DMatrix::<f64>::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
            let m = gauss(n, n);
            let h = m.transpose() * &m + DMatrix::<f64>::identity(n, n) * 0.1;
            let a = gauss(me.min(n - 1), n);
            let c = gauss(mi, n);
            let q = gauss(n, 1) * 3.0;
            let x0 = gauss(n, 1);
            let slack = gauss(mi, 1).map(|v| v.max(0.0));
            dense_problem(&h, q.as_slice(), &a, (&a * &x0).as_slice(), &c, (&c * &x0 + slack).as_slice())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn solved_means_kkt_within_tolerance(seed in any::<u64>(), n in 2usize..16, me in 0usize..4, mi in 0usize..10) {
                let p = problem(seed, n, me, mi);
                let mut solver = QpSolver::new(QpSettings::default());
                let sol = solver.solve(&p, None).unwrap();
                if sol.status == QpStatus::Solved {
                    let kkt = p.kkt_residuals(&sol.primal, &sol.eq_dual, &sol.ineq_dual);
                    prop_assert!(kkt.within(solver.settings().tol), "{kkt:?}");
                }
                let oracle = crate::oracle::enumerate_qp(&p).unwrap().unwrap();
                let gap = sol.primal.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                prop_assert!(gap <= 1e-6, "gap {gap:.3e}");
            }
        }
    }
}
