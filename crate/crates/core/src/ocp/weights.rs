use std::collections::BTreeMap;

use nalgebra::{DMatrix, SMatrix, SymmetricEigen};
use thiserror::Error;

use crate::model::{AgentModel, AgentReference, CouplingGraph, Input, State, StateMatrix, INPUT_DIM, STATE_DIM};
use crate::riccati::{solve_dare, RiccatiError};

pub type InputWeight = SMatrix<f64, INPUT_DIM, INPUT_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("Riccati solve failed for block ({i},{j}): {source}")]
    Riccati { i: usize, j: usize, source: RiccatiError },
    #[error("assembled {0} is not positive definite (min eigenvalue {1:e})")]
    NotPositiveDefinite(&'static str, f64),
    #[error("block ({0},{1}) couples agents that are not neighbors")]
    NonNeighborBlock(usize, usize),
    #[error("block ({0},{1}) is not symmetric or does not match its transpose partner")]
    Asymmetric(usize, usize),
    #[error("missing weight for agent {0}")]
    Missing(usize),
    #[error("off-diagonal block ({0},{1}) is indefinite")]
    IndefiniteCoupling(usize, usize),
}

/// Centralized weights stored blockwise: `Q_ij`, `P_ij` for `j ∈ N_i ∪ {i}`
/// and `R_i`, plus the slack penalty and the ADMM penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    agent_count: usize,
    q: BTreeMap<(usize, usize), StateMatrix>,
    p: BTreeMap<(usize, usize), StateMatrix>,
    r: Vec<InputWeight>,
    pub slack_penalty: f64,
    pub rho: f64,
}

/// Agent-local split of the coupled quadratic forms. The copy weight
/// `½|W_ij|` held by agent `i` for its copy of `x_j` is subtracted from the
/// owner's diagonal block, so the sum of all local costs equals the
/// centralized cost whenever copies agree, and each local cost stays convex
/// for diagonally dominant weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalQuadratic {
    pub own: StateMatrix,
    /// `½ W_ij` per neighbor slot.
    pub cross: Vec<StateMatrix>,
    /// `½ |W_ij|` per neighbor slot.
    pub copy: Vec<StateMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalWeights {
    pub stage: LocalQuadratic,
    pub terminal: LocalQuadratic,
    pub input: InputWeight,
    pub slack_penalty: f64,
}

fn to_dmatrix<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

fn to_state_matrix(m: &DMatrix<f64>) -> StateMatrix {
    StateMatrix::from_column_slice(m.as_slice())
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// `V|Λ|Vᵀ` of a symmetric block.
fn abs_symmetric(m: &StateMatrix) -> StateMatrix {
    let e = SymmetricEigen::new(*m);
    let m = e.eigenvectors * StateMatrix::from_diagonal(&e.eigenvalues.map(f64::abs)) * e.eigenvectors.transpose();
    0.5 * (m + m.transpose())
}

/// +1 for PSD, −1 for NSD, 0 for indefinite blocks.
fn definiteness(m: &StateMatrix) -> i8 {
    let ev = SymmetricEigen::new(*m).eigenvalues;
    let tol = 1e-12 * m.amax().max(1.0);
    if ev.iter().all(|&v| v >= -tol) {
        1
    } else if ev.iter().all(|&v| v <= tol) {
        -1
    } else {
        0
    }
}

fn is_symmetric(m: &StateMatrix) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0)
}

impl WeightSet {
    pub fn agent_count(&self) -> usize {
        self.agent_count
    }

    /// `Q_ij`, zero for uncoupled pairs.
    pub fn q(&self, i: usize, j: usize) -> StateMatrix {
        self.q.get(&(i, j)).copied().unwrap_or_else(StateMatrix::zeros)
    }

    pub fn p(&self, i: usize, j: usize) -> StateMatrix {
        self.p.get(&(i, j)).copied().unwrap_or_else(StateMatrix::zeros)
    }

    pub fn r(&self, i: usize) -> InputWeight {
        self.r[i]
    }

    fn assemble(&self, blocks: &BTreeMap<(usize, usize), StateMatrix>) -> DMatrix<f64> {
        let n = self.agent_count * STATE_DIM;
        let mut m = DMatrix::zeros(n, n);
        for (&(i, j), b) in blocks {
            m.view_mut((i * STATE_DIM, j * STATE_DIM), (STATE_DIM, STATE_DIM)).copy_from(b);
        }
        m
    }

    pub fn centralized_q(&self) -> DMatrix<f64> {
        self.assemble(&self.q)
    }

    pub fn centralized_p(&self) -> DMatrix<f64> {
        self.assemble(&self.p)
    }

    fn split(&self, blocks: &BTreeMap<(usize, usize), StateMatrix>, i: usize, neighbors: &[usize]) -> LocalQuadratic {
        let get = |a: usize, b: usize| blocks.get(&(a, b)).copied().unwrap_or_else(StateMatrix::zeros);
        let mut own = get(i, i);
        for &j in neighbors {
            own -= 0.5 * abs_symmetric(&get(j, i));
        }
        LocalQuadratic {
            own,
            cross: neighbors.iter().map(|&j| 0.5 * get(i, j)).collect(),
            copy: neighbors.iter().map(|&j| 0.5 * abs_symmetric(&get(i, j))).collect(),
        }
    }

    pub fn local(&self, i: usize, neighbors: &[usize]) -> LocalWeights {
        LocalWeights {
            stage: self.split(&self.q, i, neighbors),
            terminal: self.split(&self.p, i, neighbors),
            input: self.r[i],
            slack_penalty: self.slack_penalty,
        }
    }
}

/// Builds the weight set and the Riccati terminal blocks.
///
/// Each coupling block gets `P_ij = sgn(Q_ij)·DARE(A, B, |Q_ij|, R)`. The
/// diagonal block is assembled from the same per-pair solutions plus the
/// DARE of the anchor remainder `Q_ii − Σ_j |Q_ij|`, which keeps `[P_ij]`
/// positive definite whenever `[Q_ij]` is. If the remainder is not positive
/// semidefinite the diagonal block falls back to `DARE(A, B, Q_ii, R_i)`.
pub fn build_weights(
    graph: &CouplingGraph,
    q_blocks: &BTreeMap<(usize, usize), StateMatrix>,
    r_blocks: &[InputWeight],
    model: &AgentModel,
    slack_penalty: f64,
    rho: f64,
) -> Result<WeightSet, WeightError> {
    let s = graph.agent_count();
    if r_blocks.len() != s {
        return Err(WeightError::Missing(r_blocks.len().min(s)));
    }
    for (&(i, j), block) in q_blocks {
        if i != j && !graph.has_edge(i, j) && block.amax() > 0.0 {
            return Err(WeightError::NonNeighborBlock(i, j));
        }
        if !is_symmetric(block) {
            return Err(WeightError::Asymmetric(i, j));
        }
        let partner = q_blocks.get(&(j, i)).copied().unwrap_or_else(StateMatrix::zeros);
        if (partner - block.transpose()).amax() > 1e-12 * block.amax().max(1.0) {
            return Err(WeightError::Asymmetric(i, j));
        }
    }
    for i in 0..s {
        let qii = q_blocks.get(&(i, i)).ok_or(WeightError::Missing(i))?;
        let ev = min_eigenvalue(&to_dmatrix(qii));
        if ev <= 0.0 {
            return Err(WeightError::NotPositiveDefinite("Q_ii", ev));
        }
        let ev = min_eigenvalue(&to_dmatrix(&r_blocks[i]));
        if ev <= 0.0 {
            return Err(WeightError::NotPositiveDefinite("R_i", ev));
        }
    }
    let q: BTreeMap<_, _> = q_blocks.iter().filter(|(_, b)| b.amax() > 0.0).map(|(k, v)| (*k, *v)).collect();
    let mut set = WeightSet { agent_count: s, q, p: BTreeMap::new(), r: r_blocks.to_vec(), slack_penalty, rho };
    let min_q = min_eigenvalue(&set.centralized_q());
    if min_q <= 0.0 {
        return Err(WeightError::NotPositiveDefinite("Q", min_q));
    }

    let a = to_dmatrix(&model.a);
    let b = to_dmatrix(&model.b);
    let dare = |i: usize, j: usize, w: &StateMatrix, r: &InputWeight| -> Result<StateMatrix, WeightError> {
        if w.amax() == 0.0 {
            return Ok(StateMatrix::zeros());
        }
        solve_dare(&a, &b, &to_dmatrix(w), &to_dmatrix(r))
            .map(|p| to_state_matrix(&p))
            .map_err(|source| WeightError::Riccati { i, j, source })
    };

    let mut p = BTreeMap::new();
    let mut edge_terms: Vec<StateMatrix> = vec![StateMatrix::zeros(); s];
    for (i, j) in graph.edges() {
        let qij = set.q(i, j);
        if qij.amax() == 0.0 {
            continue;
        }
        let sign = match definiteness(&qij) {
            0 => return Err(WeightError::IndefiniteCoupling(i, j)),
            d => d as f64,
        };
        let r_pair = 0.5 * (r_blocks[i] + r_blocks[j]);
        let pij = dare(i, j, &abs_symmetric(&qij), &r_pair)?;
        p.insert((i, j), sign * pij);
        p.insert((j, i), sign * pij.transpose());
        edge_terms[i] += pij;
        edge_terms[j] += pij;
    }
    for i in 0..s {
        let qii = set.q(i, i);
        let mut remainder = qii;
        for j in graph.neighbors(i).expect("index in range") {
            remainder -= abs_symmetric(&set.q(i, j));
        }
        let pii = if min_eigenvalue(&to_dmatrix(&remainder)) >= -1e-12 * qii.amax() {
            let anchor = remainder.map(|v| if v.abs() < 1e-12 * qii.amax() { 0.0 } else { v });
            dare(i, i, &anchor, &r_blocks[i])? + edge_terms[i]
        } else {
            dare(i, i, &qii, &r_blocks[i])?
        };
        p.insert((i, i), 0.5 * (pii + pii.transpose()));
    }
    set.p = p;
    let min_p = min_eigenvalue(&set.centralized_p());
    if min_p <= 0.0 {
        return Err(WeightError::NotPositiveDefinite("P", min_p));
    }
    Ok(set)
}

/// Formation weights: `Q = base ⊗ (L + D_anchor)`, i.e. relative errors
/// between neighbors plus absolute errors for anchored agents.
pub fn formation_q_blocks(graph: &CouplingGraph, base: &StateMatrix, anchored: &[usize]) -> BTreeMap<(usize, usize), StateMatrix> {
    let mut blocks = BTreeMap::new();
    for i in 0..graph.agent_count() {
        let deg = graph.neighbors(i).expect("index in range").len();
        let weight = deg as f64 + if anchored.contains(&i) { 1.0 } else { 0.0 };
        blocks.insert((i, i), base * weight);
    }
    for (i, j) in graph.edges() {
        blocks.insert((i, j), -base);
        blocks.insert((j, i), -base);
    }
    blocks
}

fn error(x: &State, r: &AgentReference) -> State {
    x - r.state
}

/// `ℓ_i(x, u_i) = Σ_j ½ (x_i − x_i,d)ᵀ Q_ij (x_j − x_j,d) + ½ ‖u_i − u_i,d‖²_{R_i}`.
pub fn stage_cost(states: &[State], input: &Input, refs: &[AgentReference], weights: &WeightSet, i: usize) -> f64 {
    let ei = error(&states[i], &refs[i]);
    let mut cost = 0.0;
    for (j, xj) in states.iter().enumerate() {
        let qij = weights.q(i, j);
        if qij.amax() != 0.0 {
            cost += 0.5 * ei.dot(&(qij * error(xj, &refs[j])));
        }
    }
    let du = input - refs[i].input;
    cost + 0.5 * du.dot(&(weights.r(i) * du))
}

/// `V_f,i(x) = Σ_j ½ (x_i − x_i,d)ᵀ P_ij (x_j − x_j,d)`.
pub fn terminal_cost(states: &[State], refs: &[AgentReference], weights: &WeightSet, i: usize) -> f64 {
    let ei = error(&states[i], &refs[i]);
    states
        .iter()
        .enumerate()
        .map(|(j, xj)| {
            let pij = weights.p(i, j);
            if pij.amax() == 0.0 {
                0.0
            } else {
                0.5 * ei.dot(&(pij * error(xj, &refs[j])))
            }
        })
        .sum()
}

/// Stage weights used in the experiments: anchored agents and interior
/// agents share `diag(28,28,18,18,40,18)`, the last path agent gets half of
/// it, and neighbors couple through `−diag(14,14,9,9,20,9)`.
pub fn default_base_weight() -> StateMatrix {
    StateMatrix::from_diagonal(&State::from_column_slice(&[14.0, 14.0, 9.0, 9.0, 20.0, 9.0]))
}

pub fn default_input_weight() -> InputWeight {
    InputWeight::from_diagonal_element(0.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_set(dt: f64) -> (CouplingGraph, WeightSet) {
        let g = CouplingGraph::path(4).unwrap();
        let q = formation_q_blocks(&g, &default_base_weight(), &[0]);
        let model = AgentModel::new(dt).unwrap();
        let w = build_weights(&g, &q, &vec![default_input_weight(); 4], &model, 1e3, 4.0).unwrap();
        (g, w)
    }

    #[test]
    fn formation_blocks_match_expected_values() {
        let (_, w) = default_set(0.05);
        let d = |v: [f64; 6]| StateMatrix::from_diagonal(&State::from_column_slice(&v));
        for i in 0..3 {
            assert_eq!(w.q(i, i), d([28.0, 28.0, 18.0, 18.0, 40.0, 18.0]));
        }
        assert_eq!(w.q(3, 3), d([14.0, 14.0, 9.0, 9.0, 20.0, 9.0]));
        assert_eq!(w.q(1, 2), -d([14.0, 14.0, 9.0, 9.0, 20.0, 9.0]));
        assert_eq!(w.q(0, 2), StateMatrix::zeros());
        assert_eq!(w.p(0, 3), StateMatrix::zeros());
        assert!(min_eigenvalue(&w.centralized_q()) > 0.0);
        assert!(min_eigenvalue(&w.centralized_p()) > 0.0);
    }

    #[test]
    fn scalar_style_terminal_weight() {
        // single agent: P_11 = DARE(Q_11)
        let g = CouplingGraph::path(1).unwrap();
        let model = AgentModel::new(1.0).unwrap();
        let mut q = BTreeMap::new();
        q.insert((0, 0), StateMatrix::identity());
        let w = build_weights(&g, &q, &[InputWeight::identity()], &model, 1e3, 1.0).unwrap();
        let direct = solve_dare(&to_dmatrix(&model.a), &to_dmatrix(&model.b), &DMatrix::identity(6, 6), &DMatrix::identity(3, 3)).unwrap();
        assert!((to_dmatrix(&w.p(0, 0)) - direct).amax() < 1e-12);
    }

    #[test]
    fn rejects_non_neighbor_and_indefinite() {
        let g = CouplingGraph::path(3).unwrap();
        let model = AgentModel::new(0.05).unwrap();
        let mut q = formation_q_blocks(&g, &default_base_weight(), &[0]);
        q.insert((0, 2), -default_base_weight());
        q.insert((2, 0), -default_base_weight());
        let r = vec![default_input_weight(); 3];
        assert_eq!(build_weights(&g, &q, &r, &model, 1e3, 4.0), Err(WeightError::NonNeighborBlock(0, 2)));
        // no anchor: Laplacian only, singular Q
        let q = formation_q_blocks(&g, &default_base_weight(), &[]);
        assert!(matches!(build_weights(&g, &q, &r, &model, 1e3, 4.0), Err(WeightError::NotPositiveDefinite("Q", _))));
    }

    #[test]
    fn local_split_sums_to_centralized_cost() {
        let (g, w) = default_set(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let errs: Vec<State> = (0..4).map(|_| State::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let mut central = DMatrix::zeros(24, 1);
        for (i, e) in errs.iter().enumerate() {
            central.view_mut((6 * i, 0), (6, 1)).copy_from(e);
        }
        for (blocks, pick) in [(w.centralized_q(), 0), (w.centralized_p(), 1)] {
            let total = 0.5 * (central.transpose() * &blocks * &central)[(0, 0)];
            let mut split = 0.0;
            for i in 0..4 {
                let nb = g.neighbors(i).unwrap();
                let lw = w.local(i, &nb);
                let lq = if pick == 0 { &lw.stage } else { &lw.terminal };
                split += 0.5 * errs[i].dot(&(lq.own * errs[i]));
                for (k, &j) in nb.iter().enumerate() {
                    split += errs[i].dot(&(lq.cross[k] * errs[j])) + 0.5 * errs[j].dot(&(lq.copy[k] * errs[j]));
                }
            }
            assert!((total - split).abs() < 1e-9 * total.abs().max(1.0));
        }
    }

    #[test]
    fn local_hessians_are_psd_for_default_weights() {
        let (g, w) = default_set(0.05);
        for i in 0..4 {
            let nb = g.neighbors(i).unwrap();
            let lw = w.local(i, &nb);
            for lq in [&lw.stage, &lw.terminal] {
                let m = nb.len() + 1;
                let mut h = DMatrix::zeros(6 * m, 6 * m);
                h.view_mut((0, 0), (6, 6)).copy_from(&lq.own);
                for k in 0..nb.len() {
                    let o = 6 * (k + 1);
                    h.view_mut((0, o), (6, 6)).copy_from(&lq.cross[k]);
                    h.view_mut((o, 0), (6, 6)).copy_from(&lq.cross[k].transpose());
                    h.view_mut((o, o), (6, 6)).copy_from(&lq.copy[k]);
                }
                assert!(min_eigenvalue(&h) > -1e-9 * h.amax(), "agent {i}");
            }
        }
    }

    #[test]
    fn stage_and_terminal_cost_values() {
        let g = CouplingGraph::path(1).unwrap();
        let model = AgentModel::new(0.05).unwrap();
        let mut q = BTreeMap::new();
        q.insert((0, 0), StateMatrix::from_diagonal(&State::from_column_slice(&[28.0, 28.0, 18.0, 18.0, 40.0, 18.0])));
        let w = build_weights(&g, &q, &[default_input_weight()], &model, 1e3, 4.0).unwrap();
        let r = AgentReference { state: State::zeros(), input: Input::zeros() };
        let x = State::from_column_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(stage_cost(&[State::zeros()], &Input::zeros(), &[r], &w, 0), 0.0);
        assert!((stage_cost(&[x], &Input::zeros(), &[r], &w, 0) - 14.0).abs() < 1e-12);
        assert!((stage_cost(&[State::zeros()], &Input::new(1.0, 0.0, 0.0), &[r], &w, 0) - 0.05).abs() < 1e-12);
        assert_eq!(terminal_cost(&[State::zeros()], &[r], &w, 0), 0.0);
        let expect = 0.5 * w.p(0, 0)[(0, 0)];
        assert!((terminal_cost(&[x], &[r], &w, 0) - expect).abs() < 1e-12);
    }
}
