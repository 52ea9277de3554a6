//! Compressed sparse row matrices, reverse Cuthill-McKee ordering and an
//! envelope (skyline) LDLᵀ factorization.
//!
//! The OCP matrices are banded in prediction time once permuted, so a
//! profile factorization after RCM reordering is both simple and fast. The
//! factorization is used for symmetric positive definite systems as well as
//! quasi-definite KKT systems, which are strongly factorizable under any
//! symmetric permutation.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error("zero or non-finite pivot {value} at permuted row {row}")]
    BadPivot { row: usize, value: f64 },
    #[error("matrix is not square ({nrows}x{ncols})")]
    NotSquare { nrows: usize, ncols: usize },
}

/// Coordinate-format builder; duplicates are summed on conversion.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self { nrows, ncols, entries: Vec::with_capacity(cap) }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols, "({row},{col}) out of bounds");
        self.entries.push((row, col, value));
    }

    /// Adds a dense block with its top-left corner at `(row, col)`.
    pub fn push_block(&mut self, row: usize, col: usize, block: &DMatrix<f64>) {
        for r in 0..block.nrows() {
            for c in 0..block.ncols() {
                let v = block[(r, c)];
                if v != 0.0 {
                    self.push(row + r, col + c, v);
                }
            }
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn build(mut self) -> CsrMatrix {
        self.entries.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..self.nrows {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix { nrows: self.nrows, ncols: self.ncols, indptr, indices, values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, indptr: vec![0; nrows + 1], indices: Vec::new(), values: Vec::new() }
    }

    pub fn identity(n: usize, scale: f64) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![scale; n],
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut t = Triplets::new(m.nrows(), m.ncols());
        t.push_block(0, 0, m);
        t.build()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// True when both matrices share shape, pattern and values.
    pub fn same_as(&self, other: &CsrMatrix) -> bool {
        self == other
    }

    #[inline]
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        self.row(r).map(|(c, v)| v * x[c]).sum()
    }

    /// `out = A x`
    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(out.len(), self.nrows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.row_dot(r, x);
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut out);
        out
    }

    /// `out += Aᵀ y`
    pub fn tr_mul_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.nrows);
        debug_assert_eq!(out.len(), self.ncols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (c, v) in self.row(r) {
                out[c] += v * yr;
            }
        }
    }

    pub fn tr_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        self.tr_mul_add(y, &mut out);
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    pub fn select_rows(&self, rows: &[usize]) -> CsrMatrix {
        let mut t = Triplets::new(rows.len(), self.ncols);
        for (new, &r) in rows.iter().enumerate() {
            for (c, v) in self.row(r) {
                t.push(new, c, v);
            }
        }
        t.build()
    }

    pub fn vstack(blocks: &[&CsrMatrix]) -> CsrMatrix {
        let ncols = blocks.first().map_or(0, |b| b.ncols);
        let nrows = blocks.iter().map(|b| b.nrows).sum();
        let mut t = Triplets::new(nrows, ncols);
        let mut offset = 0;
        for b in blocks {
            assert_eq!(b.ncols, ncols, "vstack column mismatch");
            for (r, c, v) in b.triplets() {
                t.push(offset + r, c, v);
            }
            offset += b.nrows;
        }
        t.build()
    }

    /// Row-scaled and column-scaled copy `diag(left) A diag(right)`.
    pub fn scaled(&self, left: &[f64], right: &[f64]) -> CsrMatrix {
        let mut out = self.clone();
        for r in 0..self.nrows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                out.values[p] *= left[r] * right[self.indices[p]];
            }
        }
        out
    }

    /// Infinity norm of every column.
    pub fn col_inf_norms(&self) -> Vec<f64> {
        let mut n = vec![0.0f64; self.ncols];
        for (_, c, v) in self.triplets() {
            n[c] = n[c].max(v.abs());
        }
        n
    }

    pub fn row_inf_norms(&self) -> Vec<f64> {
        (0..self.nrows).map(|r| self.row(r).fold(0.0f64, |m, (_, v)| m.max(v.abs()))).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Reverse Cuthill-McKee ordering of a symmetric sparsity pattern given as
/// adjacency lists. Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let degree: Vec<usize> = adjacency.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (degree[v], v));

    let bfs_levels = |start: usize, mark: &mut Vec<bool>| -> (Vec<usize>, usize) {
        // returns the last level and eccentricity
        let mut seen = mark.clone();
        seen[start] = true;
        let mut level = vec![start];
        let mut depth = 0;
        loop {
            let mut next = Vec::new();
            for &v in &level {
                for &w in &adjacency[v] {
                    if !seen[w] {
                        seen[w] = true;
                        next.push(w);
                    }
                }
            }
            if next.is_empty() {
                return (level, depth);
            }
            level = next;
            depth += 1;
        }
    };

    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        // pseudo-peripheral start node (George-Liu)
        let mut start = seed;
        let (mut last, mut ecc) = bfs_levels(start, &mut visited);
        for _ in 0..4 {
            let cand = *last.iter().min_by_key(|&&v| (degree[v], v)).expect("non-empty level");
            let (l2, e2) = bfs_levels(cand, &mut visited);
            if e2 > ecc {
                start = cand;
                last = l2;
                ecc = e2;
            } else {
                break;
            }
        }
        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adjacency[v].iter().copied().filter(|&w| !visited[w]).collect();
            nbrs.sort_by_key(|&w| (degree[w], w));
            for w in nbrs {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Adjacency lists of the symmetrized off-diagonal pattern of a square matrix.
pub fn symmetric_adjacency(m: &CsrMatrix) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let mut adj = vec![Vec::new(); n];
    for (r, c, _) in m.triplets() {
        if r != c {
            adj[r].push(c);
            adj[c].push(r);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    adj
}

/// LDLᵀ factorization stored row-wise over the matrix envelope.
#[derive(Debug, Clone)]
pub struct EnvelopeLdl {
    n: usize,
    perm: Vec<usize>,
    first: Vec<usize>,
    offsets: Vec<usize>,
    lower: Vec<f64>,
    diag: Vec<f64>,
}

impl EnvelopeLdl {
    /// Factors a symmetric matrix given with both triangles. The ordering is
    /// computed with RCM when `perm` is `None`.
    pub fn factor(m: &CsrMatrix, perm: Option<Vec<usize>>) -> Result<Self, FactorError> {
        if m.nrows() != m.ncols() {
            return Err(FactorError::NotSquare { nrows: m.nrows(), ncols: m.ncols() });
        }
        let n = m.nrows();
        let perm = perm.unwrap_or_else(|| reverse_cuthill_mckee(&symmetric_adjacency(m)));
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for (r, c, _) in m.triplets() {
            let (pr, pc) = (inv[r], inv[c]);
            if pc < pr {
                first[pr] = first[pr].min(pc);
            }
        }
        let mut offsets = vec![0usize; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + (i - first[i]);
        }
        let mut lower = vec![0.0; offsets[n]];
        let mut diag = vec![0.0; n];
        for (r, c, v) in m.triplets() {
            let (pr, pc) = (inv[r], inv[c]);
            if pc < pr {
                lower[offsets[pr] + pc - first[pr]] += v;
            } else if pc == pr {
                diag[pr] += v;
            }
        }

        for i in 0..n {
            let fi = first[i];
            let (done, rest) = lower.split_at_mut(offsets[i]);
            let row_i = &mut rest[..i - fi];
            // row_i holds unscaled t_k = l_ik d_k while sweeping
            for j in fi..i {
                let fj = first[j];
                let lo = fi.max(fj);
                if lo < j {
                    let row_j = &done[offsets[j] + lo - fj..offsets[j] + j - fj];
                    let ri = &row_i[lo - fi..j - fi];
                    let s: f64 = ri.iter().zip(row_j).map(|(a, b)| a * b).sum();
                    row_i[j - fi] -= s;
                }
            }
            let mut d = diag[i];
            for (k, t) in row_i.iter_mut().enumerate() {
                let dk = diag[fi + k];
                let l = *t / dk;
                d -= l * *t;
                *t = l;
            }
            if !d.is_finite() || d.abs() < 1e-300 {
                return Err(FactorError::BadPivot { row: i, value: d });
            }
            diag[i] = d;
        }
        Ok(Self { n, perm, first, offsets, lower, diag })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of positive pivots.
    pub fn positive_pivots(&self) -> usize {
        self.diag.iter().filter(|&&d| d > 0.0).count()
    }

    /// Pivots in original (unpermuted) index order.
    pub fn pivot_of(&self, original: usize) -> f64 {
        let new = self.perm.iter().position(|&p| p == original).expect("index in range");
        self.diag[new]
    }

    pub fn envelope_size(&self) -> usize {
        self.lower.len()
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.lower[self.offsets[i]..self.offsets[i + 1]];
            let s: f64 = row.iter().zip(&y[fi..i]).map(|(l, v)| l * v).sum();
            y[i] -= s;
        }
        for (v, d) in y.iter_mut().zip(&self.diag) {
            *v /= d;
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let xi = y[i];
            if xi != 0.0 {
                let row = &self.lower[self.offsets[i]..self.offsets[i + 1]];
                for (k, l) in row.iter().enumerate() {
                    y[fi + k] -= l * xi;
                }
            }
        }
        for (new, &old) in self.perm.iter().enumerate() {
            b[old] = y[new];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_banded_spd(n: usize, band: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(band)..i {
                let v: f64 = rng.random_range(-1.0..1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        for i in 0..n {
            m[(i, i)] = 2.0 * band as f64 + 1.0;
        }
        m
    }

    #[test]
    fn triplets_sum_duplicates() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 1, 1.0);
        t.push(0, 1, 2.5);
        t.push(1, 0, -1.0);
        let m = t.build();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.to_dense()[(0, 1)], 3.5);
    }

    #[test]
    fn products_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DMatrix::from_fn(5, 7, |_, _| if rng.random_bool(0.5) { rng.random_range(-2.0..2.0) } else { 0.0 });
        let s = CsrMatrix::from_dense(&d);
        let x: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
        let y: Vec<f64> = (0..5).map(|i| 0.5 * i as f64).collect();
        let ax = s.mul_vec(&x);
        let atx = s.tr_mul(&y);
        let ax_ref = &d * nalgebra::DVector::from_vec(x);
        let aty_ref = d.transpose() * nalgebra::DVector::from_vec(y);
        for i in 0..5 {
            assert!((ax[i] - ax_ref[i]).abs() < 1e-12);
        }
        for i in 0..7 {
            assert!((atx[i] - aty_ref[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rcm_is_permutation_and_shrinks_scrambled_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 60;
        let band = random_banded_spd(n, 2, &mut rng);
        // scramble with a fixed permutation
        let scramble: Vec<usize> = (0..n).map(|i| (i * 37) % n).collect();
        let scrambled = DMatrix::from_fn(n, n, |i, j| band[(scramble[i], scramble[j])]);
        let csr = CsrMatrix::from_dense(&scrambled);
        let perm = reverse_cuthill_mckee(&symmetric_adjacency(&csr));
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let f = EnvelopeLdl::factor(&csr, Some(perm)).unwrap();
        let natural = EnvelopeLdl::factor(&csr, Some((0..n).collect())).unwrap();
        assert!(f.envelope_size() < natural.envelope_size() / 3);
    }

    #[test]
    fn spd_solve_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_banded_spd(40, 4, &mut rng);
        let csr = CsrMatrix::from_dense(&m);
        let f = EnvelopeLdl::factor(&csr, None).unwrap();
        assert_eq!(f.positive_pivots(), 40);
        let b: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = f.solve(&b);
        let r = &m * nalgebra::DVector::from_vec(x) - nalgebra::DVector::from_vec(b);
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn quasi_definite_kkt_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 12;
        let m = 5;
        let h = random_banded_spd(n, 3, &mut rng);
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&h);
        k.view_mut((n, 0), (m, n)).copy_from(&a);
        k.view_mut((0, n), (n, m)).copy_from(&a.transpose());
        for i in 0..m {
            k[(n + i, n + i)] = -1e-3;
        }
        let f = EnvelopeLdl::factor(&CsrMatrix::from_dense(&k), None).unwrap();
        assert_eq!(f.positive_pivots(), n);
        let b: Vec<f64> = (0..n + m).map(|i| (i as f64).sin()).collect();
        let x = f.solve(&b);
        let r = &k * nalgebra::DVector::from_vec(x) - nalgebra::DVector::from_vec(b);
        assert!(r.amax() < 1e-10);
    }

    #[test]
    fn singular_pivot_is_reported() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = EnvelopeLdl::factor(&CsrMatrix::from_dense(&m), Some(vec![0, 1])).unwrap_err();
        assert!(matches!(err, FactorError::BadPivot { row: 1, .. }));
    }
}
