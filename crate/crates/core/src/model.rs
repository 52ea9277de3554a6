//! Swarm description: coupling graph, double-integrator agent model,
//! reference schedules and obstacle motion.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATE_DIM: usize = 6;
pub const INPUT_DIM: usize = 3;
pub const OUTPUT_DIM: usize = 3;
pub const EXTENDED_DIM: usize = STATE_DIM + INPUT_DIM;

pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputMatrix = SMatrix<f64, STATE_DIM, INPUT_DIM>;
pub type State = SVector<f64, STATE_DIM>;
pub type Input = SVector<f64, INPUT_DIM>;
pub type Output = SVector<f64, OUTPUT_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("agent index {index} out of range for {count} agents")]
    AgentOutOfRange { index: usize, count: usize },
    #[error("self-loop on agent {0}")]
    SelfLoop(usize),
}

/// Undirected, time-invariant coupling graph over agents `0..agent_count`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingGraph {
    agent_count: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl CouplingGraph {
    pub fn new(agent_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, ModelError> {
        if agent_count == 0 {
            return Err(ModelError::InvalidParameter("a swarm needs at least one agent".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            for idx in [a, b] {
                if idx >= agent_count {
                    return Err(ModelError::AgentOutOfRange { index: idx, count: agent_count });
                }
            }
            if a == b {
                return Err(ModelError::SelfLoop(a));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self { agent_count, edges: set })
    }

    /// `N_i = {i-1, i+1} ∩ S`
    pub fn path(agent_count: usize) -> Result<Self, ModelError> {
        Self::new(agent_count, (1..agent_count).map(|i| (i - 1, i)))
    }

    pub fn agent_count(&self) -> usize {
        self.agent_count
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Sorted neighbor set of agent `i`.
    pub fn neighbors(&self, i: usize) -> Result<Vec<usize>, ModelError> {
        if i >= self.agent_count {
            return Err(ModelError::AgentOutOfRange { index: i, count: self.agent_count });
        }
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| match (a == i, b == i) {
                (true, _) => Some(b),
                (_, true) => Some(a),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.agent_count];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for w in self.neighbors(v).expect("index from graph") {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Exact zero-order-hold discretization of the planar double integrator
/// with state `(p_x, p_y, φ, v_x, v_y, ω)` and acceleration input.
pub fn zoh_discretize(dt: f64) -> Result<(StateMatrix, InputMatrix), ModelError> {
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(ModelError::InvalidParameter(format!("sampling interval must be >= 0, got {dt}")));
    }
    let mut a = StateMatrix::identity();
    let mut b = InputMatrix::zeros();
    for axis in 0..INPUT_DIM {
        a[(axis, axis + INPUT_DIM)] = dt;
        b[(axis, axis)] = 0.5 * dt * dt;
        b[(axis + INPUT_DIM, axis)] = dt;
    }
    Ok((a, b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    pub dt: f64,
    pub a: StateMatrix,
    pub b: InputMatrix,
}

impl AgentModel {
    pub fn new(dt: f64) -> Result<Self, ModelError> {
        if dt <= 0.0 {
            return Err(ModelError::InvalidParameter(format!("sampling interval must be > 0, got {dt}")));
        }
        let (a, b) = zoh_discretize(dt)?;
        Ok(Self { dt, a, b })
    }

    /// `A x + B (u + d)`
    pub fn step(&self, x: &State, u: &Input, d: &Input) -> State {
        self.a * x + self.b * (u + d)
    }
}

/// Physical state plus constant input disturbance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExtendedState {
    pub state: State,
    pub disturbance: Input,
}

impl ExtendedState {
    pub fn to_vector(&self) -> SVector<f64, EXTENDED_DIM> {
        SVector::<f64, EXTENDED_DIM>::from_fn(|i, _| if i < STATE_DIM { self.state[i] } else { self.disturbance[i - STATE_DIM] })
    }

    pub fn from_vector(v: &SVector<f64, EXTENDED_DIM>) -> Self {
        Self {
            state: State::from_fn(|i, _| v[i]),
            disturbance: Input::from_fn(|i, _| v[STATE_DIM + i]),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.state[0], self.state[1]]
    }
}

/// Position box of the table with a safety margin on every side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableGeometry {
    pub width: f64,
    pub height: f64,
    pub margin: f64,
}

impl Default for TableGeometry {
    fn default() -> Self {
        Self { width: 1.0, height: 0.6, margin: 0.03 }
    }
}

impl TableGeometry {
    pub fn lower(&self) -> [f64; 2] {
        [self.margin, self.margin]
    }

    pub fn upper(&self) -> [f64; 2] {
        [self.width - self.margin, self.height - self.margin]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (lo, hi) = (self.lower(), self.upper());
        (0..2).all(|k| p[k] >= lo[k] && p[k] <= hi[k])
    }
}

/// Desired state and feedforward input of one agent at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentReference {
    pub state: State,
    pub input: Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointSegment {
    /// Segment start in seconds.
    pub start: f64,
    /// `(p_x, p_y, φ)` per agent.
    pub poses: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSchedule {
    /// Piecewise-constant formation setpoints; the first segment must start at 0.
    Setpoints { segments: Vec<SetpointSegment> },
    /// Agent 0 follows a three-petal rose, the others keep fixed offsets to it.
    Clover {
        center: [f64; 2],
        scale: f64,
        lap_time: f64,
        offsets: Vec<[f64; 2]>,
    },
}

impl ReferenceSchedule {
    pub fn agent_count(&self) -> usize {
        match self {
            ReferenceSchedule::Setpoints { segments } => segments.first().map_or(0, |s| s.poses.len()),
            ReferenceSchedule::Clover { offsets, .. } => offsets.len(),
        }
    }

    pub fn validate(&self, agents: usize) -> Result<(), ModelError> {
        match self {
            ReferenceSchedule::Setpoints { segments } => {
                let Some(first) = segments.first() else {
                    return Err(ModelError::InvalidParameter("empty setpoint schedule".into()));
                };
                if first.start != 0.0 {
                    return Err(ModelError::InvalidParameter("first setpoint segment must start at t = 0".into()));
                }
                if segments.windows(2).any(|w| w[1].start <= w[0].start) {
                    return Err(ModelError::InvalidParameter("setpoint segments must be strictly increasing in time".into()));
                }
                if segments.iter().any(|s| s.poses.len() != agents) {
                    return Err(ModelError::InvalidParameter(format!("every setpoint segment needs {agents} poses")));
                }
            }
            ReferenceSchedule::Clover { scale, lap_time, offsets, .. } => {
                if *scale <= 0.0 || *lap_time <= 0.0 {
                    return Err(ModelError::InvalidParameter("clover scale and lap time must be positive".into()));
                }
                if offsets.len() != agents {
                    return Err(ModelError::InvalidParameter(format!("clover needs {agents} offsets")));
                }
            }
        }
        Ok(())
    }

    /// Reference of `agent` at `time` seconds.
    pub fn at(&self, agent: usize, time: f64) -> AgentReference {
        match self {
            ReferenceSchedule::Setpoints { segments } => {
                let seg = segments.iter().rev().find(|s| s.start <= time).unwrap_or(&segments[0]);
                let p = seg.poses[agent];
                AgentReference {
                    state: State::from_column_slice(&[p[0], p[1], p[2], 0.0, 0.0, 0.0]),
                    input: Input::zeros(),
                }
            }
            ReferenceSchedule::Clover { center, scale, lap_time, offsets } => {
                let c = clover_kinematics(time, *lap_time, *scale);
                let o = offsets[agent];
                AgentReference {
                    state: State::from_column_slice(&[
                        center[0] + c.position[0] + o[0],
                        center[1] + c.position[1] + o[1],
                        c.yaw,
                        c.velocity[0],
                        c.velocity[1],
                        0.0,
                    ]),
                    input: Input::new(c.acceleration[0], c.acceleration[1], 0.0),
                }
            }
        }
    }
}

/// Position, velocity and acceleration along the rose curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloverPoint {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub acceleration: [f64; 2],
    pub yaw: f64,
}

/// Rose curve `r = a sin(3θ)`, `θ = 2πt/T`, yaw held at zero.
pub fn clover_reference(t: f64, lap_time: f64, scale: f64) -> ([f64; 2], f64) {
    let c = clover_kinematics(t, lap_time, scale);
    (c.position, c.yaw)
}

pub fn clover_kinematics(t: f64, lap_time: f64, scale: f64) -> CloverPoint {
    // sin3θ·cosθ = (sin4θ + sin2θ)/2, sin3θ·sinθ = (cos2θ − cos4θ)/2
    let w = 2.0 * PI / lap_time;
    let th = w * t;
    let h = 0.5 * scale;
    let (s2, c2) = (2.0 * th).sin_cos();
    let (s4, c4) = (4.0 * th).sin_cos();
    CloverPoint {
        position: [h * (s4 + s2), h * (c2 - c4)],
        velocity: [h * w * (4.0 * c4 + 2.0 * c2), h * w * (4.0 * s4 - 2.0 * s2)],
        acceleration: [h * w * w * (-16.0 * s4 - 4.0 * s2), h * w * w * (16.0 * c4 - 4.0 * c2)],
        yaw: 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObstacleMotion {
    Static { position: [f64; 2] },
    /// Rests at phase zero until `start_time`, then circles with period `period`.
    Circular {
        center: [f64; 2],
        radius: f64,
        period: f64,
        #[serde(default)]
        start_time: f64,
    },
    /// Shuttles back and forth between `from` and `to` at constant speed.
    LinearTraverse { from: [f64; 2], to: [f64; 2], speed: f64 },
}

impl ObstacleMotion {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ObstacleMotion::Static { .. } => Ok(()),
            ObstacleMotion::Circular { radius, period, .. } if *radius >= 0.0 && *period > 0.0 => Ok(()),
            ObstacleMotion::LinearTraverse { from, to, speed } if *speed > 0.0 && from != to => Ok(()),
            other => Err(ModelError::InvalidParameter(format!("degenerate obstacle motion {other:?}"))),
        }
    }

    pub fn position_at(&self, time: f64) -> [f64; 2] {
        match self {
            ObstacleMotion::Static { position } => *position,
            ObstacleMotion::Circular { center, radius, period, start_time } => {
                let phase = 2.0 * PI * (time - start_time).max(0.0) / period;
                [center[0] + radius * phase.cos(), center[1] + radius * phase.sin()]
            }
            ObstacleMotion::LinearTraverse { from, to, speed } => {
                let len = ((to[0] - from[0]).powi(2) + (to[1] - from[1]).powi(2)).sqrt();
                let s = (speed * time / len).rem_euclid(2.0);
                let frac = if s <= 1.0 { s } else { 2.0 - s };
                [from[0] + frac * (to[0] - from[0]), from[1] + frac * (to[1] - from[1])]
            }
        }
    }
}

/// Obstacle position at sampling instant `step`.
pub fn obstacle_position(motion: &ObstacleMotion, step: usize, dt: f64) -> [f64; 2] {
    motion.position_at(step as f64 * dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zoh_identity_at_zero() {
        let (a, b) = zoh_discretize(0.0).unwrap();
        assert_eq!(a, StateMatrix::identity());
        assert_eq!(b, InputMatrix::zeros());
        assert!(zoh_discretize(-0.1).is_err());
        assert!(AgentModel::new(0.0).is_err());
    }

    #[test]
    fn zoh_entries() {
        let (a, b) = zoh_discretize(0.05).unwrap();
        assert_eq!(a[(0, 3)], 0.05);
        assert!((b[(0, 0)] - 0.00125).abs() < 1e-15);
        assert_eq!(b[(3, 0)], 0.05);
        let (_, b) = zoh_discretize(0.15).unwrap();
        assert!((b[(1, 1)] - 0.01125).abs() < 1e-15);
        assert!((b[(4, 1)] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn zoh_matches_exact_integration() {
        // closed-form continuous solution under constant acceleration
        let dt = 0.07;
        let model = AgentModel::new(dt).unwrap();
        let x = State::from_column_slice(&[0.3, -0.2, 0.1, 1.5, -0.4, 2.0]);
        let u = Input::new(2.0, -1.0, 5.0);
        let next = model.step(&x, &u, &Input::zeros());
        for k in 0..3 {
            let p = x[k] + x[k + 3] * dt + 0.5 * u[k] * dt * dt;
            let v = x[k + 3] + u[k] * dt;
            assert!((next[k] - p).abs() <= 1e-12 * p.abs().max(1.0));
            assert!((next[k + 3] - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn path_graph_neighbors() {
        let g = CouplingGraph::path(4).unwrap();
        assert_eq!(g.neighbors(0).unwrap(), vec![1]);
        assert_eq!(g.neighbors(1).unwrap(), vec![0, 2]);
        assert_eq!(g.neighbors(3).unwrap(), vec![2]);
        assert!(g.neighbors(4).is_err());
        assert!(g.is_connected());
        let single = CouplingGraph::path(1).unwrap();
        assert!(single.neighbors(0).unwrap().is_empty());
        assert!(CouplingGraph::new(3, [(1, 1)]).is_err());
        assert!(!CouplingGraph::new(3, [(0, 1)]).unwrap().is_connected());
    }

    proptest! {
        #[test]
        fn neighbor_sets_are_symmetric(n in 1usize..8, raw in proptest::collection::vec((0usize..8, 0usize..8), 0..20)) {
            let edges: Vec<_> = raw.into_iter().map(|(a, b)| (a % n, b % n)).filter(|(a, b)| a != b).collect();
            let g = CouplingGraph::new(n, edges).unwrap();
            for i in 0..n {
                let ni = g.neighbors(i).unwrap();
                prop_assert!(!ni.contains(&i));
                for j in 0..n {
                    prop_assert_eq!(ni.contains(&j), g.neighbors(j).unwrap().contains(&i));
                }
            }
        }

        #[test]
        fn clover_is_continuous(t in 0.0f64..16.0) {
            let eps = 1e-6;
            let (p0, _) = clover_reference(t, 8.0, 0.25);
            let (p1, _) = clover_reference(t + eps, 8.0, 0.25);
            let d = ((p1[0] - p0[0]).powi(2) + (p1[1] - p0[1]).powi(2)).sqrt();
            // peak speed of the rose is below 3·a·2π/T
            prop_assert!(d <= eps * 3.0 * 0.25 * 2.0 * PI / 8.0 * 1.01);
        }
    }

    #[test]
    fn obstacle_motion_positions() {
        let s = ObstacleMotion::Static { position: [0.5, 0.5] };
        assert_eq!(obstacle_position(&s, 17, 0.05), [0.5, 0.5]);
        let c = ObstacleMotion::Circular { center: [0.0, 0.0], radius: 0.3, period: 2.0, start_time: 0.0 };
        assert_eq!(obstacle_position(&c, 0, 0.05), [0.3, 0.0]);
        // t·Δt = T/4
        let q = obstacle_position(&c, 10, 0.05);
        assert!(q[0].abs() < 1e-12 && (q[1] - 0.3).abs() < 1e-12);
        let l = ObstacleMotion::LinearTraverse { from: [0.0, 0.3], to: [1.0, 0.3], speed: 0.5 };
        assert_eq!(l.position_at(1.0), [0.5, 0.3]);
        assert_eq!(l.position_at(2.0), [1.0, 0.3]);
        assert!((l.position_at(3.0)[0] - 0.5).abs() < 1e-12);
        assert_eq!(l.position_at(4.0), [0.0, 0.3]);
    }

    #[test]
    fn clover_values() {
        let (p, yaw) = clover_reference(0.0, 8.0, 0.25);
        assert!(p[0].abs() < 1e-15 && p[1].abs() < 1e-15);
        assert_eq!(yaw, 0.0);
        let (q, _) = clover_reference(8.0, 8.0, 0.25);
        assert!(q[0].abs() < 1e-12 && q[1].abs() < 1e-12);
        let (tip, _) = clover_reference(8.0 / 12.0, 8.0, 0.25);
        let r = (tip[0].powi(2) + tip[1].powi(2)).sqrt();
        assert!((r - 0.25).abs() < 1e-12);
        // polar form check at an arbitrary time
        let t = 1.3;
        let th = 2.0 * PI * t / 8.0;
        let (p, _) = clover_reference(t, 8.0, 0.25);
        let r = 0.25 * (3.0 * th).sin();
        assert!((p[0] - r * th.cos()).abs() < 1e-12 && (p[1] - r * th.sin()).abs() < 1e-12);
    }

    #[test]
    fn clover_derivatives_match_finite_differences() {
        let (lap, a, h) = (8.0, 0.25, 1e-5);
        for &t in &[0.0, 0.7, 2.9, 5.5] {
            let c = clover_kinematics(t, lap, a);
            let p = |t: f64| clover_kinematics(t, lap, a);
            for k in 0..2 {
                let v = (p(t + h).position[k] - p(t - h).position[k]) / (2.0 * h);
                let acc = (p(t + h).velocity[k] - p(t - h).velocity[k]) / (2.0 * h);
                assert!((v - c.velocity[k]).abs() < 1e-8);
                assert!((acc - c.acceleration[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn setpoint_schedule_lookup() {
        let sched = ReferenceSchedule::Setpoints {
            segments: vec![
                SetpointSegment { start: 0.0, poses: vec![[0.1, 0.2, 0.0]] },
                SetpointSegment { start: 2.0, poses: vec![[0.5, 0.4, 0.0]] },
            ],
        };
        sched.validate(1).unwrap();
        assert_eq!(sched.at(0, 1.99).state[0], 0.1);
        assert_eq!(sched.at(0, 2.0).state[0], 0.5);
        assert_eq!(sched.at(0, 2.0).input, Input::zeros());
        assert!(sched.validate(2).is_err());
    }
}
