//! Per-agent optimal control problem: decision layout with neighbor state
//! copies and slacks, quadratic cost, constraints and their linearization.

mod avoidance;
mod layout;
mod weights;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentModel, AgentReference, Input, ModelError, State, TableGeometry, INPUT_DIM, STATE_DIM};
use crate::qp::QpProblem;
use crate::sparse::{CsrMatrix, Triplets};

pub use avoidance::{linearize_avoidance, linearize_avoidance_with, AvoidanceLinearization};
pub use layout::{decision_dims, CopyLink, CouplingMap, DecisionLayout, BOX_ROWS};
pub use weights::{
    build_weights, formation_q_blocks, default_base_weight, default_input_weight, stage_cost, terminal_cost, InputWeight, LocalQuadratic,
    LocalWeights, WeightError, WeightSet,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unsupported setting: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HessianKind {
    #[default]
    GaussNewton,
    /// Exact Lagrangian Hessian; not available.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSettings {
    pub horizon: usize,
    pub dt: f64,
    pub input_lower: [f64; 3],
    pub input_upper: [f64; 3],
    pub table: TableGeometry,
    pub min_distance: f64,
    /// Whether obstacle-avoidance rows are part of the layout.
    pub obstacle: bool,
    #[serde(default)]
    pub hessian: HessianKind,
}

impl OcpSettings {
    pub fn validate(&self) -> Result<(), OcpError> {
        let bad = |m: &str| Err(OcpError::Model(ModelError::InvalidParameter(m.into())));
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("sampling interval must be positive");
        }
        if !(self.min_distance > 0.0) {
            return bad("minimum distance must be positive");
        }
        if (0..3).any(|c| !(self.input_lower[c] <= 0.0 && self.input_upper[c] >= 0.0)) {
            return bad("input box must contain zero");
        }
        let (lo, hi) = (self.table.lower(), self.table.upper());
        if lo[0] >= hi[0] || lo[1] >= hi[1] {
            return bad("table margin leaves no feasible area");
        }
        if self.hessian == HessianKind::Exact {
            return Err(OcpError::Unsupported("exact Hessian".into()));
        }
        Ok(())
    }

    pub fn clamp_input(&self, u: &Input) -> Input {
        Input::from_fn(|c, _| u[c].clamp(self.input_lower[c], self.input_upper[c]))
    }
}

/// Data that changes from one control step to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct StageContext {
    /// Estimated state `x_i(t)`.
    pub state: State,
    /// Input `u_i(t)` applied during the current interval.
    pub input: Input,
    /// Disturbance estimate used in the prediction model.
    pub disturbance: Input,
    /// Own references over the horizon (`N+1` entries).
    pub references: Vec<AgentReference>,
    /// References of each neighbor slot over the horizon.
    pub neighbor_references: Vec<Vec<AgentReference>>,
    pub obstacle: Option<[f64; 2]>,
}

/// QP data of one agent at a linearization point `z^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSubproblem {
    pub point: Vec<f64>,
    pub hessian: Arc<CsrMatrix>,
    pub gradient: Vec<f64>,
    pub eq_jacobian: Arc<CsrMatrix>,
    pub eq_residual: Vec<f64>,
    pub ineq_jacobian: CsrMatrix,
    pub ineq_residual: Vec<f64>,
}

impl LinearizedSubproblem {
    pub fn dim(&self) -> usize {
        self.point.len()
    }

    /// `∇f(z^k) − H z^k`, the linear term of the model in absolute variables.
    pub fn linear_term(&self) -> Vec<f64> {
        let hz = self.hessian.mul_vec(&self.point);
        self.gradient.iter().zip(&hz).map(|(g, h)| g - h).collect()
    }

    fn shifted_rhs(jac: &CsrMatrix, point: &[f64], residual: &[f64]) -> Vec<f64> {
        let jz = jac.mul_vec(point);
        jz.iter().zip(residual).map(|(a, r)| a - r).collect()
    }

    /// The convex model in absolute variables:
    /// `min ½zᵀHz + qᵀz  s.t.  ∇g z = ∇g z^k − g,  ∇h z ≤ ∇h z^k − h`.
    pub fn to_qp(&self) -> QpProblem {
        QpProblem {
            hessian: (*self.hessian).clone(),
            linear: self.linear_term(),
            eq_matrix: (*self.eq_jacobian).clone(),
            eq_rhs: Self::shifted_rhs(&self.eq_jacobian, &self.point, &self.eq_residual),
            ineq_matrix: self.ineq_jacobian.clone(),
            ineq_rhs: Self::shifted_rhs(&self.ineq_jacobian, &self.point, &self.ineq_residual),
        }
    }

    /// The model objective `½(z−z^k)ᵀH(z−z^k) + ∇fᵀ(z−z^k)`.
    pub fn model_cost(&self, z: &[f64]) -> f64 {
        let d: Vec<f64> = z.iter().zip(&self.point).map(|(a, b)| a - b).collect();
        let hd = self.hessian.mul_vec(&d);
        d.iter().zip(&hd).map(|(a, b)| 0.5 * a * b).sum::<f64>() + d.iter().zip(&self.gradient).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Static part of one agent's problem: layout, Hessian and dynamics Jacobian.
#[derive(Debug, Clone)]
pub struct LocalOcp {
    agent: usize,
    layout: DecisionLayout,
    settings: OcpSettings,
    weights: LocalWeights,
    model: AgentModel,
    hessian: Arc<CsrMatrix>,
    eq_jacobian: Arc<CsrMatrix>,
}

fn dense<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_column_slice(R, C, m.as_slice())
}

fn check_finite(v: &[f64], what: &'static str) -> Result<(), OcpError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(OcpError::NonFinite(what))
    }
}

impl LocalOcp {
    pub fn new(agent: usize, neighbors: Vec<usize>, settings: OcpSettings, weights: &WeightSet) -> Result<Self, OcpError> {
        settings.validate()?;
        let layout = DecisionLayout::new(settings.horizon, neighbors, settings.obstacle);
        let local = weights.local(agent, layout.neighbors());
        let model = AgentModel::new(settings.dt)?;
        let hessian = Arc::new(Self::assemble_hessian(&layout, &local));
        let eq_jacobian = Arc::new(Self::assemble_equality_jacobian(&layout, &model));
        Ok(Self { agent, layout, settings, weights: local, model, hessian, eq_jacobian })
    }

    fn assemble_hessian(layout: &DecisionLayout, w: &LocalWeights) -> CsrMatrix {
        let n = layout.len();
        let mut t = Triplets::with_capacity(n, n, 64 * n);
        let horizon = layout.horizon();
        for stage in 0..=horizon {
            let quad = if stage < horizon { &w.stage } else { &w.terminal };
            let xs = layout.state(stage);
            t.push_block(xs, xs, &dense(&quad.own));
            for slot in 0..layout.neighbors().len() {
                let ws = layout.copy(slot, stage);
                t.push_block(xs, ws, &dense(&quad.cross[slot]));
                t.push_block(ws, xs, &dense(&quad.cross[slot].transpose()));
                t.push_block(ws, ws, &dense(&quad.copy[slot]));
            }
            if stage < horizon {
                let us = layout.input(stage);
                t.push_block(us, us, &dense(&w.input));
            }
        }
        for s in layout.slacks() {
            t.push(s, s, w.slack_penalty);
        }
        t.build()
    }

    fn assemble_equality_jacobian(layout: &DecisionLayout, model: &AgentModel) -> CsrMatrix {
        let horizon = layout.horizon();
        let rows = STATE_DIM + INPUT_DIM + STATE_DIM * horizon;
        let mut t = Triplets::new(rows, layout.len());
        for c in 0..STATE_DIM {
            t.push(c, layout.state(0) + c, 1.0);
        }
        for c in 0..INPUT_DIM {
            t.push(STATE_DIM + c, layout.input(0) + c, 1.0);
        }
        let neg_a = dense(&(-model.a));
        let neg_b = dense(&(-model.b));
        for stage in 0..horizon {
            let row = STATE_DIM + INPUT_DIM + STATE_DIM * stage;
            for c in 0..STATE_DIM {
                t.push(row + c, layout.state(stage + 1) + c, 1.0);
            }
            t.push_block(row, layout.state(stage), &neg_a);
            t.push_block(row, layout.input(stage), &neg_b);
        }
        t.build()
    }

    pub fn agent(&self) -> usize {
        self.agent
    }

    pub fn layout(&self) -> &DecisionLayout {
        &self.layout
    }

    pub fn settings(&self) -> &OcpSettings {
        &self.settings
    }

    pub fn weights(&self) -> &LocalWeights {
        &self.weights
    }

    pub fn model(&self) -> &AgentModel {
        &self.model
    }

    pub fn hessian(&self) -> &Arc<CsrMatrix> {
        &self.hessian
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    pub fn eq_rows(&self) -> usize {
        self.eq_jacobian.nrows()
    }

    pub fn hard_input_rows(&self) -> usize {
        2 * INPUT_DIM * (self.layout.horizon() - 1)
    }

    pub fn ineq_rows(&self) -> usize {
        self.hard_input_rows() + 2 * self.layout.slack_count()
    }

    /// Constant-hold trajectory of `state` with zero inputs and copies set
    /// to the neighbors' states.
    pub fn initial_guess(&self, state: &State, neighbor_states: &[State]) -> Vec<f64> {
        let mut z = vec![0.0; self.dim()];
        for stage in 0..=self.layout.horizon() {
            let o = self.layout.state(stage);
            z[o..o + STATE_DIM].copy_from_slice(state.as_slice());
            for (slot, s) in neighbor_states.iter().enumerate().take(self.layout.neighbors().len()) {
                let o = self.layout.copy(slot, stage);
                z[o..o + STATE_DIM].copy_from_slice(s.as_slice());
            }
        }
        z
    }

    fn check_context(&self, ctx: &StageContext) -> Result<(), OcpError> {
        let n = self.layout.horizon() + 1;
        if ctx.references.len() != n {
            return Err(OcpError::Dimension { what: "references", expected: n, got: ctx.references.len() });
        }
        if ctx.neighbor_references.len() != self.layout.neighbors().len() {
            return Err(OcpError::Dimension {
                what: "neighbor references",
                expected: self.layout.neighbors().len(),
                got: ctx.neighbor_references.len(),
            });
        }
        for r in &ctx.neighbor_references {
            if r.len() != n {
                return Err(OcpError::Dimension { what: "neighbor references", expected: n, got: r.len() });
            }
        }
        check_finite(ctx.state.as_slice(), "state estimate")?;
        check_finite(ctx.input.as_slice(), "committed input")?;
        check_finite(ctx.disturbance.as_slice(), "disturbance estimate")?;
        if let Some(p) = ctx.obstacle {
            check_finite(&p, "obstacle position")?;
        }
        Ok(())
    }

    fn check_point(&self, z: &[f64]) -> Result<(), OcpError> {
        if z.len() != self.dim() {
            return Err(OcpError::Dimension { what: "decision vector", expected: self.dim(), got: z.len() });
        }
        check_finite(z, "decision vector")
    }

    /// `z_d`: references for states, inputs and copies; zero slacks.
    pub fn reference_vector(&self, ctx: &StageContext) -> Vec<f64> {
        let mut zd = vec![0.0; self.dim()];
        let horizon = self.layout.horizon();
        for stage in 0..=horizon {
            let o = self.layout.state(stage);
            zd[o..o + STATE_DIM].copy_from_slice(ctx.references[stage].state.as_slice());
            if stage < horizon {
                let o = self.layout.input(stage);
                zd[o..o + INPUT_DIM].copy_from_slice(ctx.references[stage].input.as_slice());
            }
            for (slot, refs) in ctx.neighbor_references.iter().enumerate() {
                let o = self.layout.copy(slot, stage);
                zd[o..o + STATE_DIM].copy_from_slice(refs[stage].state.as_slice());
            }
        }
        zd
    }

    /// `f_i(z) = ½ (z − z_d)ᵀ H (z − z_d)`.
    pub fn cost(&self, ctx: &StageContext, z: &[f64]) -> f64 {
        let zd = self.reference_vector(ctx);
        let e: Vec<f64> = z.iter().zip(&zd).map(|(a, b)| a - b).collect();
        let he = self.hessian.mul_vec(&e);
        0.5 * e.iter().zip(&he).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn cost_gradient(&self, ctx: &StageContext, z: &[f64]) -> Vec<f64> {
        let zd = self.reference_vector(ctx);
        let e: Vec<f64> = z.iter().zip(&zd).map(|(a, b)| a - b).collect();
        self.hessian.mul_vec(&e)
    }

    /// `g_i(z)`: initial condition, committed input and disturbed dynamics.
    pub fn equality(&self, ctx: &StageContext, z: &[f64]) -> Vec<f64> {
        let mut g = self.eq_jacobian.mul_vec(z);
        for c in 0..STATE_DIM {
            g[c] -= ctx.state[c];
        }
        for c in 0..INPUT_DIM {
            g[STATE_DIM + c] -= ctx.input[c];
        }
        let bd = self.model.b * ctx.disturbance;
        for stage in 0..self.layout.horizon() {
            let row = STATE_DIM + INPUT_DIM + STATE_DIM * stage;
            for c in 0..STATE_DIM {
                g[row + c] -= bd[c];
            }
        }
        g
    }

    fn position(&self, z: &[f64], offset: usize) -> [f64; 2] {
        [z[offset], z[offset + 1]]
    }

    fn obstacle_point(&self, ctx: &StageContext) -> Option<[f64; 2]> {
        if self.layout.has_obstacle() {
            ctx.obstacle
        } else {
            None
        }
    }

    fn neighbor_fallback(&self, slot: usize) -> [f64; 2] {
        if self.agent < self.layout.neighbors()[slot] {
            [1.0, 0.0]
        } else {
            [-1.0, 0.0]
        }
    }

    /// `h_i(z) ≤ 0` with the exact (non-convex) avoidance rows.
    pub fn inequality(&self, ctx: &StageContext, z: &[f64]) -> Vec<f64> {
        let s = &self.settings;
        let d2 = s.min_distance * s.min_distance;
        let mut h = Vec::with_capacity(self.ineq_rows());
        for stage in 1..self.layout.horizon() {
            let o = self.layout.input(stage);
            for c in 0..INPUT_DIM {
                h.push(z[o + c] - s.input_upper[c]);
                h.push(s.input_lower[c] - z[o + c]);
            }
        }
        let (lo, hi) = (s.table.lower(), s.table.upper());
        for stage in 0..=self.layout.horizon() {
            let p = self.position(z, self.layout.state(stage));
            let slack = |row: usize| z[self.layout.slack(stage, row)];
            h.push(p[0] - hi[0] - slack(0));
            h.push(lo[0] - p[0] - slack(1));
            h.push(p[1] - hi[1] - slack(2));
            h.push(lo[1] - p[1] - slack(3));
            for slot in 0..self.layout.neighbors().len() {
                let q = self.position(z, self.layout.copy(slot, stage));
                let dist2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                h.push(d2 - dist2 - slack(BOX_ROWS + slot));
            }
            if self.layout.has_obstacle() {
                let row = BOX_ROWS + self.layout.neighbors().len();
                match self.obstacle_point(ctx) {
                    Some(q) => {
                        let dist2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                        h.push(d2 - dist2 - slack(row));
                    }
                    None => h.push(-d2 - slack(row)),
                }
            }
        }
        for k in self.layout.slacks() {
            h.push(-z[k]);
        }
        h
    }

    /// Builds the linearization at `z`: cost gradient, constraint residuals
    /// and Jacobians. The Jacobian sparsity pattern does not depend on `z`.
    pub fn evaluate(&self, ctx: &StageContext, z: &[f64]) -> Result<LinearizedSubproblem, OcpError> {
        self.check_context(ctx)?;
        self.check_point(z)?;
        let s = &self.settings;
        let n = self.dim();
        let rows = self.ineq_rows();
        let mut jac = Triplets::with_capacity(rows, n, 4 * rows);
        let mut residual = Vec::with_capacity(rows);
        let mut row = 0;
        for stage in 1..self.layout.horizon() {
            let o = self.layout.input(stage);
            for c in 0..INPUT_DIM {
                jac.push(row, o + c, 1.0);
                residual.push(z[o + c] - s.input_upper[c]);
                jac.push(row + 1, o + c, -1.0);
                residual.push(s.input_lower[c] - z[o + c]);
                row += 2;
            }
        }
        let (lo, hi) = (s.table.lower(), s.table.upper());
        let d = s.min_distance;
        for stage in 0..=self.layout.horizon() {
            let xo = self.layout.state(stage);
            let p = self.position(z, xo);
            let slack_col = |r: usize| self.layout.slack(stage, r);
            let box_rows = [(0, 1.0, hi[0]), (0, -1.0, -lo[0]), (1, 1.0, hi[1]), (1, -1.0, -lo[1])];
            for (r, &(axis, sign, bound)) in box_rows.iter().enumerate() {
                jac.push(row, xo + axis, sign);
                jac.push(row, slack_col(r), -1.0);
                residual.push(sign * p[axis] - bound - z[slack_col(r)]);
                row += 1;
            }
            for slot in 0..self.layout.neighbors().len() {
                let wo = self.layout.copy(slot, stage);
                let q = self.position(z, wo);
                let lin = linearize_avoidance_with(p, q, d, self.neighbor_fallback(slot));
                let sc = slack_col(BOX_ROWS + slot);
                jac.push(row, xo, lin.grad_a[0]);
                jac.push(row, xo + 1, lin.grad_a[1]);
                jac.push(row, wo, lin.grad_b[0]);
                jac.push(row, wo + 1, lin.grad_b[1]);
                jac.push(row, sc, -1.0);
                residual.push(lin.residual - z[sc]);
                row += 1;
            }
            if self.layout.has_obstacle() {
                let sc = slack_col(BOX_ROWS + self.layout.neighbors().len());
                let (grad, value) = match self.obstacle_point(ctx) {
                    Some(q) => {
                        let lin = linearize_avoidance(p, q, d);
                        (lin.grad_a, lin.residual)
                    }
                    None => ([0.0, 0.0], -d * d),
                };
                jac.push(row, xo, grad[0]);
                jac.push(row, xo + 1, grad[1]);
                jac.push(row, sc, -1.0);
                residual.push(value - z[sc]);
                row += 1;
            }
        }
        for k in self.layout.slacks() {
            jac.push(row, k, -1.0);
            residual.push(-z[k]);
            row += 1;
        }
        debug_assert_eq!(row, rows);
        Ok(LinearizedSubproblem {
            point: z.to_vec(),
            hessian: Arc::clone(&self.hessian),
            gradient: self.cost_gradient(ctx, z),
            eq_jacobian: Arc::clone(&self.eq_jacobian),
            eq_residual: self.equality(ctx, z),
            ineq_jacobian: jac.build(),
            ineq_residual: residual,
        })
    }

    /// Input `u[stage]` of a decision vector.
    pub fn input_at(&self, z: &[f64], stage: usize) -> Input {
        let o = self.layout.input(stage);
        Input::from_column_slice(&z[o..o + INPUT_DIM])
    }

    pub fn state_at(&self, z: &[f64], stage: usize) -> State {
        let o = self.layout.state(stage);
        State::from_column_slice(&z[o..o + STATE_DIM])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CouplingGraph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn default_settings(horizon: usize, dt: f64, obstacle: bool) -> OcpSettings {
        OcpSettings {
            horizon,
            dt,
            input_lower: [-5.0, -5.0, -15.0],
            input_upper: [5.0, 5.0, 15.0],
            table: TableGeometry::default(),
            min_distance: 0.2,
            obstacle,
            hessian: HessianKind::GaussNewton,
        }
    }

    fn setup(horizon: usize, obstacle: bool) -> (Vec<LocalOcp>, WeightSet) {
        let g = CouplingGraph::path(4).unwrap();
        let q = formation_q_blocks(&g, &default_base_weight(), &[0]);
        let model = AgentModel::new(0.05).unwrap();
        let w = build_weights(&g, &q, &vec![default_input_weight(); 4], &model, 1e3, 4.0).unwrap();
        let ocps = (0..4)
            .map(|i| LocalOcp::new(i, g.neighbors(i).unwrap(), default_settings(horizon, 0.05, obstacle), &w).unwrap())
            .collect();
        (ocps, w)
    }

    fn random_context(ocp: &LocalOcp, rng: &mut ChaCha8Rng) -> StageContext {
        let n = ocp.layout().horizon() + 1;
        let mut r = |scale: f64| State::from_fn(|_, _| rng.random_range(-scale..scale));
        let refs: Vec<AgentReference> = (0..n).map(|_| AgentReference { state: r(0.5), input: Input::zeros() }).collect();
        let nb = (0..ocp.layout().neighbors().len()).map(|_| refs.clone()).collect();
        StageContext {
            state: r(0.5),
            input: Input::new(0.3, -0.2, 0.1),
            disturbance: Input::new(0.1, 0.0, -0.05),
            references: refs,
            neighbor_references: nb,
            obstacle: ocp.layout().has_obstacle().then_some([0.5, 0.3]),
        }
    }

    fn random_point(ocp: &LocalOcp, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..ocp.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn hessian_is_constant_and_symmetric() {
        let (ocps, _) = setup(5, true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for ocp in &ocps {
            let ctx = random_context(ocp, &mut rng);
            let a = ocp.evaluate(&ctx, &random_point(ocp, &mut rng)).unwrap();
            let b = ocp.evaluate(&ctx, &random_point(ocp, &mut rng)).unwrap();
            assert_eq!(*a.hessian, *b.hessian);
            let h = a.hessian.to_dense();
            assert_eq!(h, h.transpose());
        }
    }

    #[test]
    fn jacobian_pattern_is_fixed() {
        let (ocps, _) = setup(4, true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ocp = &ocps[1];
        let ctx = random_context(ocp, &mut rng);
        let a = ocp.evaluate(&ctx, &random_point(ocp, &mut rng)).unwrap();
        let b = ocp.evaluate(&ctx, &random_point(ocp, &mut rng)).unwrap();
        let pattern = |m: &CsrMatrix| m.triplets().map(|(r, c, _)| (r, c)).collect::<Vec<_>>();
        assert_eq!(pattern(&a.ineq_jacobian), pattern(&b.ineq_jacobian));
        assert_eq!(a.ineq_jacobian.nrows(), ocp.ineq_rows());
        assert_eq!(a.eq_jacobian.nrows(), ocp.eq_rows());
    }

    #[test]
    fn dynamics_consistent_point_has_zero_equality_residual() {
        let (ocps, _) = setup(6, false);
        let ocp = &ocps[2];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ctx = random_context(ocp, &mut rng);
        let mut z = random_point(ocp, &mut rng);
        let l = ocp.layout().clone();
        z[l.state(0)..l.state(0) + 6].copy_from_slice(ctx.state.as_slice());
        z[l.input(0)..l.input(0) + 3].copy_from_slice(ctx.input.as_slice());
        for stage in 0..l.horizon() {
            let next = ocp.model().step(&ocp.state_at(&z, stage), &ocp.input_at(&z, stage), &ctx.disturbance);
            z[l.state(stage + 1)..l.state(stage + 1) + 6].copy_from_slice(next.as_slice());
        }
        let g = ocp.equality(&ctx, &z);
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn separated_agents_have_inactive_avoidance_rows() {
        let (ocps, _) = setup(3, false);
        let ocp = &ocps[0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ctx = random_context(ocp, &mut rng);
        let mut z = ocp.initial_guess(&State::from_column_slice(&[0.2, 0.3, 0.0, 0.0, 0.0, 0.0]), &[State::from_column_slice(&[
            0.2, 1.3, 0.0, 0.0, 0.0, 0.0,
        ])]);
        let s = ocp.layout().neighbor_slack(1, 0);
        z[s] = 0.01;
        let lin = ocp.evaluate(&ctx, &z).unwrap();
        let h = &lin.ineq_residual;
        let base = ocp.hard_input_rows();
        let per = ocp.layout().soft_rows_per_stage();
        for stage in 0..=3 {
            let v = h[base + stage * per + BOX_ROWS];
            let slack = if stage == 1 { 0.01 } else { 0.0 };
            assert!((v - (-0.96 - slack)).abs() < 1e-12);
        }
    }

    #[test]
    fn linearization_is_exact_for_linear_parts() {
        let (ocps, _) = setup(4, true);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ocp = &ocps[1];
        let ctx = random_context(ocp, &mut rng);
        let z = random_point(ocp, &mut rng);
        let lin = ocp.evaluate(&ctx, &z).unwrap();
        assert_eq!(lin.ineq_residual, ocp.inequality(&ctx, &z));
        let zd = ocp.reference_vector(&ctx);
        let model = lin.model_cost(&zd) + ocp.cost(&ctx, &z);
        assert!(model.abs() < 1e-9 * ocp.cost(&ctx, &z).max(1.0));
    }

    #[test]
    fn rejects_non_finite_and_exact_hessian() {
        let (ocps, w) = setup(3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ocp = &ocps[0];
        let mut ctx = random_context(ocp, &mut rng);
        let mut z = random_point(ocp, &mut rng);
        z[3] = f64::NAN;
        assert_eq!(ocp.evaluate(&ctx, &z), Err(OcpError::NonFinite("decision vector")));
        z[3] = 0.0;
        ctx.state[0] = f64::INFINITY;
        assert_eq!(ocp.evaluate(&ctx, &z), Err(OcpError::NonFinite("state estimate")));
        let mut s = default_settings(3, 0.05, false);
        s.hessian = HessianKind::Exact;
        assert!(matches!(LocalOcp::new(0, vec![1], s, &w), Err(OcpError::Unsupported(_))));
    }
}
