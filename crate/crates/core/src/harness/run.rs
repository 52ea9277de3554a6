use std::fs;
use std::io;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::controller::{run_control_step, stage_context, Controller, StepInputs, StepTelemetry};
use crate::model::{AgentModel, AgentReference, ExtendedState, Input, State, StateMatrix};
use crate::netsim::{write_log_csv, Bus, BusRecord, SharedBus};
use crate::ocp::{build_weights, formation_q_blocks, InputWeight, LocalOcp, WeightSet};
use crate::oracle::centralized_sqp;
use crate::plant::{measure, plant_step, Estimator, PlantState};

use super::metrics::{closed_loop_cost, count_violations_and_collisions, timing_stats, SafetyCounts, TimingStats};
use super::{ClockMode, ControlMode, HarnessError, ScenarioSpec};

const STREAM_INITIAL: u64 = 1;
const STREAM_MEASUREMENT: u64 = 2;
const STREAM_PROCESS: u64 = 3;
const STREAM_NETWORK: u64 = 0x6e6574;

/// One agent at one sampling instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub time: f64,
    pub agent: usize,
    pub px: f64,
    pub py: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
    /// Input applied during `[t, t + Δt)`.
    pub ux: f64,
    pub uy: f64,
    pub uyaw: f64,
    pub est_px: f64,
    pub est_py: f64,
    pub est_yaw: f64,
    pub est_dx: f64,
    pub est_dy: f64,
    pub est_dyaw: f64,
    pub ref_px: f64,
    pub ref_py: f64,
    pub ref_yaw: f64,
    pub obstacle_x: Option<f64>,
    pub obstacle_y: Option<f64>,
}

impl TraceRow {
    pub fn position(&self) -> [f64; 2] {
        [self.px, self.py]
    }

    pub fn position_error(&self) -> f64 {
        (self.px - self.ref_px).hypot(self.py - self.ref_py)
    }

    pub fn disturbance_estimate(&self) -> [f64; 3] {
        [self.est_dx, self.est_dy, self.est_dyaw]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// An input is handed to the plant at the sampling instant.
    Actuation,
    /// A controller commits the input for the next sampling instant.
    Commit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopEvent {
    pub step: usize,
    pub agent: usize,
    pub kind: EventKind,
    pub time: f64,
    pub ux: f64,
    pub uy: f64,
    pub uyaw: f64,
}

impl LoopEvent {
    pub fn input(&self) -> Input {
        Input::new(self.ux, self.uy, self.uyaw)
    }
}

/// Deterministic run record; wall-clock timings are kept out of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub mode: ControlMode,
    pub network: String,
    pub agents: usize,
    pub steps: usize,
    pub dt: f64,
    pub sqp_iterations: usize,
    pub admm_iterations: usize,
    /// Averaged closed-loop cost; absent for an empty run.
    pub cost: Option<f64>,
    pub safety: SafetyCounts,
    pub timing: TimingStats,
    /// Largest position error over agents at the last instant.
    pub final_position_error: Option<f64>,
    /// Largest position error over the last half second.
    pub steady_state_error: Option<f64>,
    pub messages_sent: u64,
    pub messages_dropped: usize,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub spec: ScenarioSpec,
    pub summary: RunSummary,
    pub trace: Vec<TraceRow>,
    pub telemetry: Vec<StepTelemetry>,
    pub events: Vec<LoopEvent>,
    pub network: Vec<BusRecord>,
    /// Wall-clock seconds spent in each control step.
    pub wall_times: Vec<f64>,
}

impl RunOutput {
    /// `positions()[t][i]` of agent `i` at instant `t`.
    pub fn positions(&self) -> Vec<Vec<[f64; 2]>> {
        let s = self.spec.agent_count();
        self.trace.chunks(s).map(|c| c.iter().map(TraceRow::position).collect()).collect()
    }

    /// Largest position error over agents at every instant.
    pub fn position_errors(&self) -> Vec<f64> {
        let s = self.spec.agent_count();
        self.trace.chunks(s).map(|c| c.iter().map(TraceRow::position_error).fold(0.0, f64::max)).collect()
    }

    pub fn rows_for(&self, agent: usize) -> impl Iterator<Item = &TraceRow> {
        self.trace.iter().filter(move |r| r.agent == agent)
    }
}

enum Coordinator {
    Distributed { controllers: Vec<Controller>, bus: Bus },
    Centralized { ocps: Vec<LocalOcp>, iterates: Vec<Vec<f64>>, current: Vec<Input> },
    WallClock { controllers: Vec<Controller>, bus: SharedBus, epoch: Instant },
}

impl Coordinator {
    fn current_inputs(&self) -> Vec<Input> {
        match self {
            Coordinator::Distributed { controllers, .. } | Coordinator::WallClock { controllers, .. } => {
                controllers.iter().map(Controller::current_input).collect()
            }
            Coordinator::Centralized { current, .. } => current.clone(),
        }
    }

    /// Runs one control step and returns the committed inputs.
    fn step(&mut self, inputs: Vec<StepInputs>, step: usize, start: f64, dt: f64) -> Result<(Vec<Input>, Vec<StepTelemetry>), HarnessError> {
        match self {
            Coordinator::Distributed { controllers, bus } => {
                let tel = run_control_step(controllers, bus, inputs, step, start, dt)?;
                Ok((controllers.iter().map(Controller::committed_input).collect(), tel))
            }
            Coordinator::Centralized { ocps, iterates, current } => {
                let contexts: Vec<_> = inputs.into_iter().zip(current.iter()).map(|(i, u)| stage_context(i, *u)).collect();
                let result = centralized_sqp(ocps, &contexts, iterates.clone(), 1e-8, 20)?;
                if !result.converged {
                    log::debug!("centralized step {step} stopped at step norm {:.3e}", result.step_norm);
                }
                *iterates = result.iterates;
                let committed: Vec<Input> = ocps.iter().zip(iterates.iter()).map(|(o, z)| o.settings().clamp_input(&o.input_at(z, 1))).collect();
                current.clone_from(&committed);
                let tel = ocps
                    .iter()
                    .map(|o| StepTelemetry { step, agent: o.agent(), timely: true, commit_delay: dt, ..StepTelemetry::default() })
                    .collect();
                Ok((committed, tel))
            }
            Coordinator::WallClock { controllers, bus, epoch } => {
                let target = *epoch + Duration::from_secs_f64(start);
                let now = Instant::now();
                if target > now {
                    std::thread::sleep(target - now);
                }
                let begin = epoch.elapsed().as_secs_f64();
                let bus = &*bus;
                let epoch = *epoch;
                let results: Vec<_> = std::thread::scope(|scope| {
                    let handles: Vec<_> = controllers
                        .iter_mut()
                        .zip(inputs)
                        .map(|(c, i)| scope.spawn(move || c.run_wall_clock_step(bus, i, step, epoch, begin, dt)))
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("agent thread panicked")).collect()
                });
                let mut tel = results.into_iter().collect::<Result<Vec<_>, _>>()?;
                // report delays against the nominal sampling instant
                for t in &mut tel {
                    t.commit_delay += begin - start;
                }
                Ok((controllers.iter().map(Controller::committed_input).collect(), tel))
            }
        }
    }

    fn network_log(&self) -> (Vec<BusRecord>, u64, usize) {
        match self {
            Coordinator::Distributed { bus, .. } => (bus.log().to_vec(), bus.sent(), bus.dropped()),
            Coordinator::Centralized { .. } => (Vec::new(), 0, 0),
            Coordinator::WallClock { bus, .. } => {
                let bus = bus.lock().unwrap_or_else(|e| e.into_inner());
                (bus.log().to_vec(), bus.sent(), bus.dropped())
            }
        }
    }
}

pub(super) fn scenario_weights(spec: &ScenarioSpec, model: &AgentModel) -> Result<WeightSet, HarnessError> {
    let graph = spec.graph()?;
    let base = StateMatrix::from_diagonal(&State::from(spec.weights.state));
    let q = formation_q_blocks(&graph, &base, &spec.weights.anchored);
    let r = vec![InputWeight::from_diagonal(&Input::from(spec.weights.input)); spec.agent_count()];
    Ok(build_weights(&graph, &q, &r, model, spec.weights.slack_penalty, spec.controller.rho)?)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn input_array(u: &Input) -> [f64; 3] {
    [u[0], u[1], u[2]]
}

/// Simulates the closed loop for the whole scenario. Configuration errors
/// are returned as `Err`; failures during the run stop it early and are
/// reported in `summary.aborted` alongside the partial logs.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<RunOutput, HarnessError> {
    spec.validate()?;
    let s = spec.agent_count();
    let dt = spec.dt;
    let horizon = spec.horizon;
    let steps = spec.steps();
    let graph = spec.graph()?;
    let model = AgentModel::new(dt)?;
    let weights = scenario_weights(spec, &model)?;
    let neighbors = (0..s).map(|i| graph.neighbors(i)).collect::<Result<Vec<_>, _>>()?;
    let ocps = (0..s).map(|i| LocalOcp::new(i, neighbors[i].clone(), spec.ocp_settings(), &weights)).collect::<Result<Vec<_>, _>>()?;

    let nominal = spec.initial_states();
    let mut init_rng = stream(spec.seed, STREAM_INITIAL);
    let mut meas_rng = stream(spec.seed, STREAM_MEASUREMENT);
    let mut proc_rng = stream(spec.seed, STREAM_PROCESS);
    let mut plants: Vec<PlantState> = nominal
        .iter()
        .zip(&spec.agents)
        .map(|(x, a)| {
            let mut x = *x;
            if spec.noise.initial_jitter > 0.0 {
                let n = Normal::new(0.0, spec.noise.initial_jitter).expect("validated");
                x[0] += n.sample(&mut init_rng);
                x[1] += n.sample(&mut init_rng);
            }
            PlantState::new(x, Input::from(a.disturbance))
        })
        .collect();
    let mut estimators = nominal
        .iter()
        .map(|x| Estimator::new(&model, &ExtendedState { state: *x, disturbance: Input::zeros() }, &spec.estimator))
        .collect::<Result<Vec<_>, _>>()?;

    let mut coordinator = match spec.mode {
        ControlMode::Distributed => {
            let controllers = ocps
                .into_iter()
                .map(|o| {
                    let states: Vec<State> = std::iter::once(nominal[o.agent()]).chain(neighbors[o.agent()].iter().map(|&j| nominal[j])).collect();
                    Controller::new(o, spec.controller.clone(), &states)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let bus = Bus::new(graph.clone(), spec.network.clone(), spec.seed ^ STREAM_NETWORK)?;
            match spec.clock {
                ClockMode::Virtual => Coordinator::Distributed { controllers, bus },
                ClockMode::WallClock => Coordinator::WallClock { controllers, bus: Arc::new(Mutex::new(bus)), epoch: Instant::now() },
            }
        }
        ControlMode::Centralized => {
            let iterates = ocps
                .iter()
                .map(|o| {
                    let nb: Vec<State> = neighbors[o.agent()].iter().map(|&j| nominal[j]).collect();
                    o.initial_guess(&nominal[o.agent()], &nb)
                })
                .collect();
            Coordinator::Centralized { ocps, iterates, current: vec![Input::zeros(); s] }
        }
    };

    let mut trace = Vec::with_capacity(steps * s);
    let mut telemetry = Vec::with_capacity(steps * s);
    let mut events = Vec::with_capacity(2 * steps * s);
    let mut wall_times = Vec::with_capacity(steps);
    let mut states_log = Vec::with_capacity(steps);
    let mut inputs_log = Vec::with_capacity(steps);
    let mut refs_log = Vec::with_capacity(steps);
    let mut positions = Vec::with_capacity(steps);
    let mut obstacle_log = Vec::with_capacity(steps);
    let mut aborted = None;

    for step in 0..steps {
        let time = step as f64 * dt;
        let outcome = (|| -> Result<(), HarnessError> {
            for (est, plant) in estimators.iter_mut().zip(&plants) {
                est.update(&measure(plant, &spec.noise.measurement, &mut meas_rng))?;
            }
            let obstacle = spec.obstacle.as_ref().map(|o| o.position_at(time));
            let references: Vec<Vec<AgentReference>> =
                (0..s).map(|i| (0..=horizon).map(|k| spec.references.at(i, time + k as f64 * dt)).collect()).collect();
            let applied = coordinator.current_inputs();
            for i in 0..s {
                let (x, e, r) = (plants[i].state, estimators[i].estimate(), references[i][0].state);
                let u = applied[i];
                trace.push(TraceRow {
                    step,
                    time,
                    agent: i,
                    px: x[0],
                    py: x[1],
                    yaw: x[2],
                    vx: x[3],
                    vy: x[4],
                    yaw_rate: x[5],
                    ux: u[0],
                    uy: u[1],
                    uyaw: u[2],
                    est_px: e.state[0],
                    est_py: e.state[1],
                    est_yaw: e.state[2],
                    est_dx: e.disturbance[0],
                    est_dy: e.disturbance[1],
                    est_dyaw: e.disturbance[2],
                    ref_px: r[0],
                    ref_py: r[1],
                    ref_yaw: r[2],
                    obstacle_x: obstacle.map(|o| o[0]),
                    obstacle_y: obstacle.map(|o| o[1]),
                });
                let [ux, uy, uyaw] = input_array(&u);
                events.push(LoopEvent { step, agent: i, kind: EventKind::Actuation, time, ux, uy, uyaw });
            }
            states_log.push(plants.iter().map(|p| p.state).collect::<Vec<_>>());
            inputs_log.push(applied.clone());
            refs_log.push(references.iter().map(|r| r[0]).collect::<Vec<_>>());
            positions.push(plants.iter().map(PlantState::position).collect::<Vec<_>>());
            if let Some(o) = obstacle {
                obstacle_log.push(o);
            }

            let step_inputs = (0..s)
                .map(|i| StepInputs {
                    estimate: estimators[i].estimate(),
                    references: references[i].clone(),
                    neighbor_references: neighbors[i].iter().map(|&j| references[j].clone()).collect(),
                    obstacle,
                })
                .collect();
            let clock = Instant::now();
            let (committed, tel) = coordinator.step(step_inputs, step, time, dt)?;
            wall_times.push(clock.elapsed().as_secs_f64());
            for (t, u) in tel.iter().zip(&committed) {
                let [ux, uy, uyaw] = input_array(u);
                events.push(LoopEvent { step, agent: t.agent, kind: EventKind::Commit, time: time + t.commit_delay, ux, uy, uyaw });
            }
            telemetry.extend(tel);

            for ((plant, est), u) in plants.iter_mut().zip(&mut estimators).zip(&applied) {
                plant_step(&model, plant, u, spec.noise.process_std, &mut proc_rng)?;
                est.predict(u);
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            log::error!("run {} aborted at step {step}: {e}", spec.name);
            aborted = Some(format!("step {step}: {e}"));
            break;
        }
    }

    let recorded = states_log.len().min(inputs_log.len());
    states_log.truncate(recorded);
    inputs_log.truncate(recorded);
    refs_log.truncate(recorded);
    let cost = closed_loop_cost(&states_log, &inputs_log, &refs_log, &weights, dt)?;
    let obstacle_trace = spec.obstacle.as_ref().map(|_| obstacle_log.as_slice());
    let safety = count_violations_and_collisions(&positions, obstacle_trace, spec.min_distance, spec.body_diameter);
    let (network, sent, dropped) = coordinator.network_log();
    let mut output = RunOutput {
        spec: spec.clone(),
        summary: RunSummary {
            name: spec.name.clone(),
            seed: spec.seed,
            mode: spec.mode,
            network: spec.network.name.clone(),
            agents: s,
            steps,
            dt,
            sqp_iterations: spec.controller.sqp_iterations,
            admm_iterations: spec.controller.admm_iterations,
            cost,
            safety,
            timing: timing_stats(&telemetry),
            final_position_error: None,
            steady_state_error: None,
            messages_sent: sent,
            messages_dropped: dropped,
            aborted,
        },
        trace,
        telemetry,
        events,
        network,
        wall_times,
    };
    let errors = output.position_errors();
    let window = ((0.5 / dt).round() as usize).max(1);
    output.summary.final_position_error = errors.last().copied();
    output.summary.steady_state_error = (!errors.is_empty()).then(|| errors[errors.len().saturating_sub(window)..].iter().copied().fold(0.0, f64::max));
    Ok(output)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes traces, telemetry, loop events, the network log, the summary and
/// the scenario into `dir`. Wall-clock timings go to their own file so the
/// summary stays reproducible.
pub fn write_outputs(output: &RunOutput, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join("trace.csv"), &output.trace)?;
    write_csv(&dir.join("telemetry.csv"), &output.telemetry)?;
    write_csv(&dir.join("events.csv"), &output.events)?;
    write_log_csv(&output.network, io::BufWriter::new(fs::File::create(dir.join("network.csv"))?))?;
    let timing: Vec<(usize, f64)> = output.wall_times.iter().copied().enumerate().collect();
    let mut w = csv::Writer::from_path(dir.join("timing.csv"))?;
    w.write_record(["step", "wall_seconds"])?;
    for (step, secs) in timing {
        w.serialize((step, secs))?;
    }
    w.flush()?;
    fs::write(dir.join("summary.json"), summary_json(&output.summary)?)?;
    fs::write(dir.join("scenario.toml"), output.spec.to_toml()?)?;
    Ok(())
}

pub(super) fn summary_json(summary: &RunSummary) -> Result<String, HarnessError> {
    Ok(serde_json::to_string_pretty(summary)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::preset;

    fn short(name: &str, seconds: f64) -> ScenarioSpec {
        let mut s = preset(name).unwrap();
        s.duration = seconds;
        s
    }

    #[test]
    fn zero_duration_gives_empty_metrics() {
        let out = run_scenario(&short("rectangle", 0.0)).unwrap();
        assert_eq!(out.summary.steps, 0);
        assert_eq!(out.summary.cost, None);
        assert!(out.trace.is_empty() && out.summary.final_position_error.is_none());
    }

    #[test]
    fn actuation_uses_previous_commit() {
        let out = run_scenario(&short("rectangle", 0.5)).unwrap();
        assert!(out.summary.aborted.is_none());
        for a in out.events.iter().filter(|e| e.kind == EventKind::Actuation) {
            let commit = out.events.iter().find(|e| e.kind == EventKind::Commit && e.agent == a.agent && e.step + 1 == a.step);
            match commit {
                Some(c) => {
                    assert_eq!(c.input(), a.input());
                    assert!(c.time <= a.time + 1e-12);
                }
                None => assert_eq!((a.step, a.input()), (0, Input::zeros())),
            }
        }
    }

    #[test]
    fn outputs_are_written() {
        let out = run_scenario(&short("swap", 0.25)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&out, dir.path()).unwrap();
        for f in ["trace.csv", "telemetry.csv", "events.csv", "network.csv", "timing.csv", "summary.json", "scenario.toml"] {
            assert!(dir.path().join(f).metadata().unwrap().len() > 0, "{f}");
        }
        let back: RunSummary = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(back.steps, 5);
        ScenarioSpec::load(&dir.path().join("scenario.toml")).unwrap();
    }

    #[test]
    fn centralized_mode_runs() {
        let mut spec = short("rectangle", 0.25);
        spec.mode = ControlMode::Centralized;
        let out = run_scenario(&spec).unwrap();
        assert!(out.summary.aborted.is_none());
        assert_eq!(out.summary.messages_sent, 0);
        assert_eq!(out.summary.timing.timely_percent, 100.0);
    }
}
