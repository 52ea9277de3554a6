use std::sync::Arc;

use crate::sparse::{inf_norm, CsrMatrix, EnvelopeLdl, FactorError, Triplets};

use super::QpProblem;

const CACHE_SLOTS: usize = 8;
const REFINEMENT_STEPS: usize = 6;

/// Solution of an equality-constrained QP with a working set of inequality
/// rows treated as equalities.
#[derive(Debug, Clone)]
pub(crate) struct EqpSolution {
    pub primal: Vec<f64>,
    pub eq_dual: Vec<f64>,
    /// Multipliers of the working-set rows, in working-set order.
    pub working_dual: Vec<f64>,
}

/// Regularized KKT factorizations keyed by working set. Entries are valid
/// only for the matrices they were built from; callers clear the cache when
/// the problem matrices change.
#[derive(Debug, Default)]
pub(crate) struct KktCache {
    entries: Vec<(Vec<usize>, Arc<EnvelopeLdl>)>,
    pub factorizations: usize,
    pub hits: usize,
}

impl KktCache {
    pub fn clear(&mut self) {
        self.entries.clear();
    }

    fn get(&mut self, working: &[usize]) -> Option<Arc<EnvelopeLdl>> {
        let pos = self.entries.iter().position(|(w, _)| w == working)?;
        let entry = self.entries.remove(pos);
        let f = Arc::clone(&entry.1);
        self.entries.push(entry);
        self.hits += 1;
        Some(f)
    }

    fn insert(&mut self, working: Vec<usize>, f: Arc<EnvelopeLdl>) {
        if self.entries.len() == CACHE_SLOTS {
            self.entries.remove(0);
        }
        self.entries.push((working, f));
    }
}

pub(crate) fn regularization(p: &QpProblem) -> (f64, f64) {
    let scale = p.hessian.values().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    (1e-11 * scale, 1e-10)
}

fn assemble(p: &QpProblem, working: &[usize], delta_p: f64, delta_d: f64) -> CsrMatrix {
    let n = p.dim();
    let me = p.eq_matrix.nrows();
    let dim = n + me + working.len();
    let nnz = p.hessian.nnz() + n + 2 * p.eq_matrix.nnz() + dim;
    let mut t = Triplets::with_capacity(dim, dim, nnz);
    for (r, c, v) in p.hessian.triplets() {
        t.push(r, c, v);
    }
    for i in 0..n {
        t.push(i, i, delta_p);
    }
    for (r, c, v) in p.eq_matrix.triplets() {
        t.push(n + r, c, v);
        t.push(c, n + r, v);
    }
    for (k, &row) in working.iter().enumerate() {
        for (c, v) in p.ineq_matrix.row(row) {
            t.push(n + me + k, c, v);
            t.push(c, n + me + k, v);
        }
    }
    for i in n..dim {
        t.push(i, i, -delta_d);
    }
    t.build()
}

/// Unregularized KKT product `[P Gᵀ; G 0] x`.
fn kkt_product(p: &QpProblem, working: &[usize], x: &[f64]) -> Vec<f64> {
    let n = p.dim();
    let me = p.eq_matrix.nrows();
    let (z, y) = x.split_at(n);
    let mut out = vec![0.0; x.len()];
    p.hessian.mul_vec_into(z, &mut out[..n]);
    let (top, bottom) = out.split_at_mut(n);
    p.eq_matrix.tr_mul_add(&y[..me], top);
    for (k, &row) in working.iter().enumerate() {
        let yk = y[me + k];
        if yk != 0.0 {
            for (c, v) in p.ineq_matrix.row(row) {
                top[c] += v * yk;
            }
        }
    }
    p.eq_matrix.mul_vec_into(z, &mut bottom[..me]);
    for (k, &row) in working.iter().enumerate() {
        bottom[me + k] = p.ineq_matrix.row_dot(row, z);
    }
    out
}

/// Solves `min ½zᵀPz + qᵀz  s.t.  Az = b,  C_W z = d_W` through the
/// quasi-definite system `[P+δI Gᵀ; G −δI]` with iterative refinement
/// against the unregularized matrix.
pub(crate) fn solve_eqp(p: &QpProblem, working: &[usize], cache: &mut KktCache) -> Result<EqpSolution, FactorError> {
    let n = p.dim();
    let me = p.eq_matrix.nrows();
    let factor = match cache.get(working) {
        Some(f) => f,
        None => {
            let (dp, dd) = regularization(p);
            let k = assemble(p, working, dp, dd);
            let f = Arc::new(EnvelopeLdl::factor(&k, None)?);
            cache.factorizations += 1;
            cache.insert(working.to_vec(), Arc::clone(&f));
            f
        }
    };
    let mut rhs = Vec::with_capacity(n + me + working.len());
    rhs.extend(p.linear.iter().map(|v| -v));
    rhs.extend_from_slice(&p.eq_rhs);
    rhs.extend(working.iter().map(|&r| p.ineq_rhs[r]));
    let rhs_norm = inf_norm(&rhs).max(1.0);
    let mut x = factor.solve(&rhs);
    let mut best = f64::INFINITY;
    for _ in 0..REFINEMENT_STEPS {
        let kx = kkt_product(p, working, &x);
        let r: Vec<f64> = rhs.iter().zip(&kx).map(|(a, b)| a - b).collect();
        let rn = inf_norm(&r);
        if rn <= 1e-15 * rhs_norm || rn >= best {
            break;
        }
        best = rn;
        let dx = factor.solve(&r);
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi += d;
        }
    }
    let working_dual = x.split_off(n + me);
    let eq_dual = x.split_off(n);
    Ok(EqpSolution { primal: x, eq_dual, working_dual })
}
