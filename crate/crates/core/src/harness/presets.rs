use crate::controller::{ComputeModel, ControllerSettings, DeadlineSettings, WarmStartMode};
use crate::model::{ObstacleMotion, ReferenceSchedule, SetpointSegment, TableGeometry};
use crate::netsim::LinkProfile;
use crate::plant::EstimatorSettings;

use super::{AgentSpec, ClockMode, ControlMode, NoiseSpec, ScenarioSpec, WeightSpec};

const NAMES: [&str; 6] = ["rectangle", "rectangle-slow", "swap", "obstacle-static", "obstacle-circular", "clover"];

pub fn preset_names() -> &'static [&'static str] {
    &NAMES
}

fn large_table() -> TableGeometry {
    TableGeometry { width: 2.0, height: 1.2, margin: 0.03 }
}

fn poses(points: &[[f64; 2]]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p[0], p[1], 0.0]).collect()
}

fn setpoints(segments: &[(f64, &[[f64; 2]])]) -> ReferenceSchedule {
    ReferenceSchedule::Setpoints { segments: segments.iter().map(|(start, p)| SetpointSegment { start: *start, poses: poses(p) }).collect() }
}

fn base(name: &str, initial: &[[f64; 2]], references: ReferenceSchedule, duration: f64) -> ScenarioSpec {
    ScenarioSpec {
        name: name.into(),
        seed: 1,
        dt: 0.05,
        horizon: 20,
        duration,
        custom_timing: false,
        mode: ControlMode::Distributed,
        clock: ClockMode::Virtual,
        min_distance: 0.2,
        body_diameter: 0.15,
        input_lower: [-5.0, -5.0, -15.0],
        input_upper: [5.0, 5.0, 15.0],
        agents: initial.iter().map(|p| AgentSpec { initial: [p[0], p[1], 0.0], disturbance: [0.0; 3] }).collect(),
        edges: None,
        table: TableGeometry::default(),
        weights: WeightSpec { state: [14.0, 14.0, 9.0, 9.0, 20.0, 9.0], anchored: vec![0], input: [0.1; 3], slack_penalty: 1e6 },
        controller: ControllerSettings {
            sqp_iterations: 1,
            admm_iterations: 30,
            rho: 4.0,
            warm_start: WarmStartMode::Faithful,
            deadline: DeadlineSettings::default(),
            compute: ComputeModel::offboard(),
            pad_to_interval: false,
        },
        network: LinkProfile::offboard(),
        noise: NoiseSpec::default(),
        estimator: EstimatorSettings::default(),
        references,
        obstacle: None,
    }
}

/// Built-in scenario by name.
pub fn preset(name: &str) -> Option<ScenarioSpec> {
    let line = [[0.17, 0.3], [0.39, 0.3], [0.61, 0.3], [0.83, 0.3]];
    let rectangle = [[0.3, 0.18], [0.3, 0.42], [0.7, 0.42], [0.7, 0.18]];
    let column_left = [[0.3, 0.225], [0.3, 0.475], [0.3, 0.725], [0.3, 0.975]];
    let column_right = [[1.7, 0.225], [1.7, 0.475], [1.7, 0.725], [1.7, 0.975]];
    let spec = match name {
        "rectangle" => base(name, &line, setpoints(&[(0.0, &rectangle)]), 10.0),
        "rectangle-slow" => {
            let mut s = base(name, &line, setpoints(&[(0.0, &rectangle)]), 12.0);
            s.dt = 0.15;
            s.horizon = 7;
            s.controller.admm_iterations = 6;
            s.network = LinkProfile::onboard();
            s
        }
        "swap" => {
            let start = [[0.14, 0.3], [0.38, 0.3], [0.62, 0.3], [0.86, 0.3]];
            let goal = [[0.14, 0.3], [0.62, 0.35], [0.38, 0.25], [0.86, 0.3]];
            base(name, &start, setpoints(&[(0.0, &goal)]), 8.0)
        }
        "obstacle-static" | "obstacle-circular" => {
            let mut s = base(name, &column_left, setpoints(&[(0.0, &column_right), (8.0, &column_left)]), 16.0);
            s.table = large_table();
            s.obstacle = Some(if name == "obstacle-static" {
                ObstacleMotion::Static { position: [1.0, 0.6] }
            } else {
                ObstacleMotion::Circular { center: [1.0, 0.6], radius: 0.25, period: 6.0, start_time: 1.0 }
            });
            s
        }
        "clover" => {
            let offsets = vec![[0.0, 0.0], [0.25, 0.0], [0.5, 0.0], [0.75, 0.0]];
            let center = [0.7, 0.6];
            let start: Vec<[f64; 2]> = offsets.iter().map(|o| [center[0] + o[0], center[1] + o[1]]).collect();
            let mut s = base(name, &start, ReferenceSchedule::Clover { center, scale: 0.25, lap_time: 8.0, offsets }, 16.0);
            s.table = large_table();
            s.controller.rho = 0.1;
            s.obstacle = Some(ObstacleMotion::LinearTraverse { from: [1.1, 0.1], to: [1.1, 1.1], speed: 0.2 });
            s
        }
        _ => return None,
    };
    Some(spec)
}
