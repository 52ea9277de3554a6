//! Scenario definitions, closed-loop orchestration and run metrics.

mod metrics;
mod presets;
mod run;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{ControllerError, ControllerSettings};
use crate::model::{CouplingGraph, ModelError, ObstacleMotion, ReferenceSchedule, State, TableGeometry};
use crate::netsim::{LinkProfile, NetError};
use crate::ocp::{HessianKind, OcpError, OcpSettings, WeightError};
use crate::oracle::OracleError;
use crate::plant::{EstimatorSettings, MeasurementNoise, PlantError};

pub use metrics::{closed_loop_cost, count_violations_and_collisions, timing_stats, SafetyCounts, TimingStats};
pub use presets::{preset, preset_names};
pub use run::{run_scenario, write_outputs, EventKind, LoopEvent, RunOutput, RunSummary, TraceRow};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("could not parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("could not serialize scenario: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("trace length mismatch: expected {expected}, found {found}")]
    TraceLength { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Network(#[from] NetError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// True for problems with the scenario itself rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_) | HarnessError::Parse(_) | HarnessError::Model(_) | HarnessError::Weights(_) | HarnessError::Ocp(_)
        )
    }
}

/// The two sampling interval and horizon pairs used on hardware.
pub const TIMING_PAIRS: [(f64, usize); 2] = [(0.05, 20), (0.15, 7)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    /// Initial `(p_x, p_y, φ)`; velocities start at zero.
    pub initial: [f64; 3],
    /// Constant input disturbance acting on the plant.
    #[serde(default)]
    pub disturbance: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    /// Diagonal of the per-edge state weight.
    pub state: [f64; 6],
    /// Agents whose absolute position error is penalized.
    pub anchored: Vec<usize>,
    /// Diagonal of the input weight.
    pub input: [f64; 3],
    pub slack_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub measurement: MeasurementNoise,
    /// Standard deviation of the per-step velocity noise on the plant.
    pub process_std: f64,
    /// Standard deviation of the initial position perturbation.
    pub initial_jitter: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { measurement: MeasurementNoise::none(), process_std: 0.0, initial_jitter: 0.0 }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { measurement: MeasurementNoise::default(), process_std: 2e-3, initial_jitter: 2e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Decentralized real-time iterations over the simulated network.
    #[default]
    Distributed,
    /// Fully converged centralized SQP each step.
    Centralized,
}

/// How control steps advance in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Lock-step logical clock; runs as fast as possible and is reproducible.
    #[default]
    Virtual,
    /// Every agent runs on its own thread, paced by the real clock. Not
    /// reproducible; meant for timing demos.
    WallClock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub seed: u64,
    pub dt: f64,
    pub horizon: usize,
    /// Simulated time in seconds; a nonnegative multiple of `dt`.
    pub duration: f64,
    /// Allow a sampling interval and horizon outside the documented pairs.
    #[serde(default)]
    pub custom_timing: bool,
    #[serde(default)]
    pub mode: ControlMode,
    #[serde(default)]
    pub clock: ClockMode,
    pub min_distance: f64,
    pub body_diameter: f64,
    pub input_lower: [f64; 3],
    pub input_upper: [f64; 3],
    pub agents: Vec<AgentSpec>,
    /// Coupling edges; a path graph when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
    pub table: TableGeometry,
    pub weights: WeightSpec,
    pub controller: ControllerSettings,
    pub network: LinkProfile,
    pub noise: NoiseSpec,
    pub estimator: EstimatorSettings,
    pub references: ReferenceSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle: Option<ObstacleMotion>,
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn graph(&self) -> Result<CouplingGraph, HarnessError> {
        let s = self.agent_count();
        Ok(match &self.edges {
            Some(edges) => CouplingGraph::new(s, edges.iter().map(|e| (e[0], e[1])))?,
            None => CouplingGraph::path(s)?,
        })
    }

    pub fn ocp_settings(&self) -> OcpSettings {
        OcpSettings {
            horizon: self.horizon,
            dt: self.dt,
            input_lower: self.input_lower,
            input_upper: self.input_upper,
            table: self.table,
            min_distance: self.min_distance,
            obstacle: self.obstacle.is_some(),
            hessian: HessianKind::GaussNewton,
        }
    }

    pub fn initial_states(&self) -> Vec<State> {
        self.agents.iter().map(|a| State::from_column_slice(&[a.initial[0], a.initial[1], a.initial[2], 0.0, 0.0, 0.0])).collect()
    }

    /// Selects a named link profile.
    pub fn set_profile(&mut self, name: &str) -> Result<(), HarnessError> {
        let profile = LinkProfile::by_name(name).ok_or_else(|| HarnessError::Config(format!("unknown network profile {name:?}")))?;
        self.network = profile;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let s = self.agent_count();
        if s == 0 {
            return bad("at least one agent is required".into());
        }
        if self.clock == ClockMode::WallClock && self.mode != ControlMode::Distributed {
            return bad("the wall clock is only available for the distributed controller".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("sampling interval must be positive".into());
        }
        if !self.custom_timing && !TIMING_PAIRS.iter().any(|&(dt, n)| (dt - self.dt).abs() < 1e-12 && n == self.horizon) {
            return bad(format!("sampling interval {} s with horizon {} is not a documented pair; set custom_timing", self.dt, self.horizon));
        }
        let ratio = self.duration / self.dt;
        if !(self.duration >= 0.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return bad("duration must be a nonnegative multiple of the sampling interval".into());
        }
        if !(self.body_diameter > 0.0) {
            return bad("body diameter must be positive".into());
        }
        if self.weights.anchored.iter().any(|&a| a >= s) {
            return bad("anchored agent out of range".into());
        }
        if self.weights.state.iter().chain(&self.weights.input).any(|w| !(*w > 0.0)) || !(self.weights.slack_penalty > 0.0) {
            return bad("weights must be positive".into());
        }
        let graph = self.graph()?;
        if !graph.is_connected() {
            return bad("coupling graph must be connected".into());
        }
        self.ocp_settings().validate()?;
        self.controller.validate()?;
        self.network.validate()?;
        self.noise.measurement.validate()?;
        if !(self.noise.process_std >= 0.0 && self.noise.initial_jitter >= 0.0) {
            return bad("noise levels must be nonnegative".into());
        }
        if !(self.estimator.measurement.position_std > 0.0 && self.estimator.measurement.yaw_std > 0.0) {
            return bad("estimator measurement noise must be positive".into());
        }
        self.references.validate(s)?;
        if let Some(o) = &self.obstacle {
            o.validate()?;
        }
        for (i, a) in self.agents.iter().enumerate() {
            if !self.table.contains([a.initial[0], a.initial[1]]) {
                return bad(format!("agent {i} starts outside the table"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::ComputeModel;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in preset_names() {
            let spec = preset(name).unwrap();
            spec.validate().unwrap();
            let text = spec.to_toml().unwrap();
            let back = ScenarioSpec::from_toml(&text).unwrap();
            assert_eq!(back, spec, "{name}");
        }
    }

    #[test]
    fn presets_encode_hardware_constants() {
        for name in preset_names() {
            let spec = preset(name).unwrap();
            assert!([(0.05, 20), (0.15, 7)].contains(&(spec.dt, spec.horizon)), "{name}");
            assert!(!spec.custom_timing);
            assert_eq!(spec.input_upper, [5.0, 5.0, 15.0]);
            assert_eq!(spec.input_lower, [-5.0, -5.0, -15.0]);
            assert_eq!(spec.min_distance, 0.2);
            assert_eq!(spec.body_diameter, 0.15);
            assert_eq!(spec.table.margin, 0.03);
            assert_eq!(spec.weights.state, [14.0, 14.0, 9.0, 9.0, 20.0, 9.0]);
            assert_eq!(spec.weights.input, [0.1; 3]);
            assert_eq!(spec.controller.sqp_iterations, 1);
            let rho = spec.controller.rho;
            match spec.references {
                ReferenceSchedule::Setpoints { .. } => assert_eq!(rho, 4.0, "{name}"),
                ReferenceSchedule::Clover { .. } => assert_eq!(rho, 0.1, "{name}"),
            }
        }
        let fast = preset("rectangle").unwrap();
        assert_eq!((fast.dt, fast.horizon, fast.controller.admm_iterations), (0.05, 20, 30));
        let slow = preset("rectangle-slow").unwrap();
        assert_eq!((slow.dt, slow.horizon), (0.15, 7));
    }

    #[test]
    fn rejects_invalid_scenarios() {
        let base = preset("rectangle").unwrap();
        let mut s = base.clone();
        s.horizon = 10;
        assert!(s.validate().is_err());
        s.custom_timing = true;
        s.validate().unwrap();
        let mut s = base.clone();
        s.duration = 0.07;
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.min_distance = 0.0;
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.edges = Some(vec![[0, 1], [2, 3]]);
        assert!(s.validate().is_err());
        let mut s = base.clone();
        s.agents[0].initial = [5.0, 0.3, 0.0];
        assert!(s.validate().is_err());
        let mut s = base;
        assert!(s.set_profile("carrier-pigeon").is_err());
        s.set_profile("onboard").unwrap();
        assert_eq!(s.network, LinkProfile::onboard());
        assert_eq!(s.controller.compute, ComputeModel::offboard());
        assert!(ScenarioSpec::from_toml("name = 3").is_err());
    }
}
