use crate::sparse::{inf_norm, CsrMatrix, EnvelopeLdl, FactorError, Triplets};

use super::{QpProblem, QpSolution};

const SIGMA: f64 = 1e-6;
const ALPHA: f64 = 1.6;
const EQ_RHO_FACTOR: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

/// Operator-splitting iteration on `l ≤ Mz ≤ u` with `M = [A; C]`,
/// solving the reduced system `P + σI + Mᵀ diag(ρ) M` at each step.
pub(crate) struct Splitting<'a> {
    p: &'a QpProblem,
    m: CsrMatrix,
    lower: Vec<f64>,
    upper: Vec<f64>,
    rho: f64,
    rho_vec: Vec<f64>,
    factor: EnvelopeLdl,
    pub x: Vec<f64>,
    z: Vec<f64>,
    pub y: Vec<f64>,
    pub iterations: usize,
    pub factorizations: usize,
}

fn reduced_matrix(p: &QpProblem, m: &CsrMatrix, rho_vec: &[f64]) -> CsrMatrix {
    let n = p.dim();
    let mut t = Triplets::with_capacity(n, n, p.hessian.nnz() + n + 8 * m.nnz());
    for (r, c, v) in p.hessian.triplets() {
        t.push(r, c, v);
    }
    for i in 0..n {
        t.push(i, i, SIGMA);
    }
    for (r, rho) in rho_vec.iter().enumerate() {
        let row: Vec<(usize, f64)> = m.row(r).collect();
        for &(a, va) in &row {
            for &(b, vb) in &row {
                t.push(a, b, rho * va * vb);
            }
        }
    }
    t.build()
}

impl<'a> Splitting<'a> {
    pub fn new(p: &'a QpProblem, warm: Option<&QpSolution>) -> Result<Self, FactorError> {
        let me = p.eq_matrix.nrows();
        let m = CsrMatrix::vstack(&[&p.eq_matrix, &p.ineq_matrix]);
        let mut lower = p.eq_rhs.clone();
        lower.extend(std::iter::repeat_n(f64::NEG_INFINITY, p.ineq_rhs.len()));
        let mut upper = p.eq_rhs.clone();
        upper.extend_from_slice(&p.ineq_rhs);
        let rho = 0.1;
        let rho_vec = Self::rho_vector(rho, me, m.nrows());
        let factor = EnvelopeLdl::factor(&reduced_matrix(p, &m, &rho_vec), None)?;
        let warm = warm.filter(|w| w.primal.len() == p.dim() && w.eq_dual.len() == me && w.ineq_dual.len() == p.ineq_rhs.len());
        let x = warm.map_or_else(|| vec![0.0; p.dim()], |w| w.primal.clone());
        let y = warm.map_or_else(|| vec![0.0; m.nrows()], |w| w.eq_dual.iter().chain(&w.ineq_dual).copied().collect());
        let z = m.mul_vec(&x).iter().zip(lower.iter().zip(&upper)).map(|(v, (l, u))| v.clamp(*l, *u)).collect();
        Ok(Self { p, m, lower, upper, rho, rho_vec, factor, x, z, y, iterations: 0, factorizations: 1 })
    }

    fn rho_vector(rho: f64, me: usize, rows: usize) -> Vec<f64> {
        (0..rows).map(|r| if r < me { rho * EQ_RHO_FACTOR } else { rho }).collect()
    }

    pub fn eq_rows(&self) -> usize {
        self.p.eq_matrix.nrows()
    }

    /// Runs `count` iterations and returns the primal and dual residuals.
    pub fn iterate(&mut self, count: usize) -> Result<(f64, f64), FactorError> {
        let n = self.p.dim();
        let rows = self.m.nrows();
        let mut rhs = vec![0.0; n];
        let mut w = vec![0.0; rows];
        let mut mz = vec![0.0; rows];
        for _ in 0..count {
            for r in 0..rows {
                w[r] = self.rho_vec[r] * self.z[r] - self.y[r];
            }
            for i in 0..n {
                rhs[i] = SIGMA * self.x[i] - self.p.linear[i];
            }
            self.m.tr_mul_add(&w, &mut rhs);
            self.factor.solve_in_place(&mut rhs);
            self.m.mul_vec_into(&rhs, &mut mz);
            for i in 0..n {
                self.x[i] = ALPHA * rhs[i] + (1.0 - ALPHA) * self.x[i];
            }
            for r in 0..rows {
                let relaxed = ALPHA * mz[r] + (1.0 - ALPHA) * self.z[r];
                let z_new = (relaxed + self.y[r] / self.rho_vec[r]).clamp(self.lower[r], self.upper[r]);
                self.y[r] += self.rho_vec[r] * (relaxed - z_new);
                self.z[r] = z_new;
            }
            self.iterations += 1;
        }
        let (rp, rd, scale_p, scale_d) = self.residuals();
        self.adapt_rho(rp, rd, scale_p, scale_d)?;
        Ok((rp, rd))
    }

    fn residuals(&self) -> (f64, f64, f64, f64) {
        let mx = self.m.mul_vec(&self.x);
        let rp = inf_norm(&mx.iter().zip(&self.z).map(|(a, b)| a - b).collect::<Vec<_>>());
        let px = self.p.hessian.mul_vec(&self.x);
        let mty = self.m.tr_mul(&self.y);
        let rd: Vec<f64> = (0..self.p.dim()).map(|i| px[i] + self.p.linear[i] + mty[i]).collect();
        let scale_p = inf_norm(&mx).max(inf_norm(&self.z)).max(1e-12);
        let scale_d = inf_norm(&px).max(inf_norm(&mty)).max(inf_norm(&self.p.linear)).max(1e-12);
        (rp, inf_norm(&rd), scale_p, scale_d)
    }

    fn adapt_rho(&mut self, rp: f64, rd: f64, scale_p: f64, scale_d: f64) -> Result<(), FactorError> {
        if rd <= 0.0 || rp <= 0.0 {
            return Ok(());
        }
        let ratio = ((rp / scale_p) / (rd / scale_d)).sqrt();
        let candidate = (self.rho * ratio).clamp(RHO_MIN, RHO_MAX);
        if candidate > 5.0 * self.rho || candidate < 0.2 * self.rho {
            self.rho = candidate;
            self.rho_vec = Self::rho_vector(candidate, self.eq_rows(), self.m.nrows());
            self.factor = EnvelopeLdl::factor(&reduced_matrix(self.p, &self.m, &self.rho_vec), None)?;
            self.factorizations += 1;
        }
        Ok(())
    }

    /// Inequality rows the iterate treats as active.
    pub fn active_guess(&self) -> Vec<usize> {
        let me = self.eq_rows();
        (0..self.p.ineq_rhs.len()).filter(|&r| self.y[me + r] > 0.0).collect()
    }

    pub fn split_dual(&self) -> (Vec<f64>, Vec<f64>) {
        let me = self.eq_rows();
        (self.y[..me].to_vec(), self.y[me..].to_vec())
    }
}
