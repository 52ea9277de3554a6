//! Per-agent real-time iteration controller and the deterministic lockstep
//! scheduler that drives a team of them over the simulated bus.
//!
//! Each control step runs `k_max` SQP iterations, each with `l_max` ADMM
//! iterations, extracts the second predicted input and commits it for the
//! next sampling instant. Virtual time advances by a compute-cost model and
//! by message arrivals, so timing is reproducible from the seed alone.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admm::{AdmmAgent, AdmmError, AdmmMessage, MessageKind};
use crate::model::{AgentReference, ExtendedState, Input, State, INPUT_DIM, STATE_DIM};
use crate::netsim::{deadline_policy, Bus, Delivery, Expected, NetError, SharedBus};
use crate::ocp::{LocalOcp, OcpError, StageContext};
use crate::qp::QpSettings;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid controller setting: {0}")]
    Invalid(String),
    #[error("step inputs for agent {0} are missing or inconsistent")]
    Inputs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WarmStartMode {
    /// Reuse the previous iterate unchanged.
    #[default]
    Faithful,
    /// Advance every stage by one and repeat the last one.
    Shifted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeadlineSettings {
    /// Longest wait for one receive, in seconds.
    pub max_wait: f64,
    /// Receives stop waiting once this fraction of the interval has passed.
    pub fraction: f64,
}

impl Default for DeadlineSettings {
    fn default() -> Self {
        Self { max_wait: 0.025, fraction: 0.75 }
    }
}

/// Virtual compute durations in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeModel {
    pub linearize: f64,
    pub local_qp: f64,
    pub average: f64,
    pub extract: f64,
}

impl ComputeModel {
    pub fn offboard() -> Self {
        Self { linearize: 1e-4, local_qp: 3e-4, average: 1e-5, extract: 1e-5 }
    }

    pub fn onboard() -> Self {
        Self { linearize: 3.4e-3, local_qp: 2.5e-3, average: 5e-5, extract: 5e-5 }
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if [self.linearize, self.local_qp, self.average, self.extract].iter().all(|v| *v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(ControllerError::Invalid("compute durations must be nonnegative".into()))
        }
    }
}

impl Default for ComputeModel {
    fn default() -> Self {
        Self::offboard()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSettings {
    pub sqp_iterations: usize,
    pub admm_iterations: usize,
    pub rho: f64,
    #[serde(default)]
    pub warm_start: WarmStartMode,
    #[serde(default)]
    pub deadline: DeadlineSettings,
    #[serde(default)]
    pub compute: ComputeModel,
    /// Commit exactly at the end of the interval, as if computing took the
    /// whole sampling interval.
    #[serde(default)]
    pub pad_to_interval: bool,
}

impl ControllerSettings {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.sqp_iterations == 0 || self.admm_iterations == 0 {
            return Err(ControllerError::Invalid("iteration counts must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(ControllerError::Invalid("penalty parameter must be positive".into()));
        }
        let d = self.deadline;
        if !(d.max_wait >= 0.0 && d.fraction > 0.0 && d.fraction <= 1.0) {
            return Err(ControllerError::Invalid("deadline settings out of range".into()));
        }
        self.compute.validate()
    }
}

/// Per-step data handed to a controller by the closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    pub estimate: ExtendedState,
    /// Own references over the horizon (`N+1` entries).
    pub references: Vec<AgentReference>,
    /// References of the neighbors in slot order.
    pub neighbor_references: Vec<Vec<AgentReference>>,
    pub obstacle: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StepTelemetry {
    pub step: usize,
    pub agent: usize,
    pub timely: bool,
    /// Commit time relative to the start of the step, in seconds.
    pub commit_delay: f64,
    pub copy_comm_steps: usize,
    pub copy_async_steps: usize,
    pub average_comm_steps: usize,
    pub average_async_steps: usize,
    pub compute_time: f64,
    pub wait_time: f64,
    /// `max |z − z̄|` after the last ADMM iteration.
    pub consensus_residual: f64,
    /// The applied input came from the previous plan.
    pub fallback: bool,
    pub error: Option<String>,
    pub qp_inaccurate: usize,
}

/// Stage context for one step. The feedforward input is reduced by the
/// disturbance estimate so the prediction model reaches the reference.
pub fn stage_context(inputs: StepInputs, current_input: Input) -> StageContext {
    let d = inputs.estimate.disturbance;
    StageContext {
        state: inputs.estimate.state,
        input: current_input,
        disturbance: d,
        references: inputs.references.iter().map(|r| AgentReference { state: r.state, input: r.input - d }).collect(),
        neighbor_references: inputs.neighbor_references,
        obstacle: inputs.obstacle,
    }
}

/// Time-shifts a stage-structured vector by one stage, repeating the last.
pub fn warm_start_shift(ocp: &LocalOcp, z: &[f64], gamma: &[f64], mode: WarmStartMode) -> (Vec<f64>, Vec<f64>) {
    match mode {
        WarmStartMode::Faithful => (z.to_vec(), gamma.to_vec()),
        WarmStartMode::Shifted => (shift_stages(ocp, z), shift_stages(ocp, gamma)),
    }
}

fn shift_stages(ocp: &LocalOcp, v: &[f64]) -> Vec<f64> {
    let l = ocp.layout();
    let horizon = l.horizon();
    let mut out = v.to_vec();
    let mut shift_block = |start: &dyn Fn(usize) -> usize, width: usize, last: usize| {
        for stage in 0..last {
            let (dst, src) = (start(stage), start(stage + 1));
            out[dst..dst + width].copy_from_slice(&v[src..src + width]);
        }
    };
    shift_block(&|s| l.state(s), STATE_DIM, horizon);
    shift_block(&|s| l.input(s), INPUT_DIM, horizon - 1);
    for slot in 0..l.neighbors().len() {
        shift_block(&|s| l.copy(slot, s), STATE_DIM, horizon);
    }
    let rows = l.soft_rows_per_stage();
    if rows > 0 {
        shift_block(&|s| l.slack(s, 0), rows, horizon);
    }
    out
}

/// One agent's controller.
#[derive(Debug)]
pub struct Controller {
    ocp: LocalOcp,
    admm: AdmmAgent,
    settings: ControllerSettings,
    current_input: Input,
    committed: Input,
    warm_z: Vec<f64>,
    warm_gamma: Vec<f64>,
    plan: Vec<f64>,
    context: Option<StageContext>,
    failed: Option<String>,
    qp_inaccurate: usize,
}

impl Controller {
    /// `initial_states` holds the agent's own state followed by its
    /// neighbors' states in slot order.
    pub fn new(ocp: LocalOcp, settings: ControllerSettings, initial_states: &[State]) -> Result<Self, ControllerError> {
        settings.validate()?;
        let slots = ocp.layout().neighbors().len();
        if initial_states.len() != slots + 1 {
            return Err(ControllerError::Inputs(ocp.agent()));
        }
        let z = ocp.initial_guess(&initial_states[0], &initial_states[1..]);
        let admm = AdmmAgent::new(ocp.agent(), ocp.layout().clone(), z.clone(), settings.rho, QpSettings::in_loop())?;
        let n = z.len();
        Ok(Self {
            ocp,
            admm,
            settings,
            current_input: Input::zeros(),
            committed: Input::zeros(),
            warm_gamma: vec![0.0; n],
            plan: z.clone(),
            warm_z: z,
            context: None,
            failed: None,
            qp_inaccurate: 0,
        })
    }

    pub fn agent(&self) -> usize {
        self.ocp.agent()
    }

    pub fn ocp(&self) -> &LocalOcp {
        &self.ocp
    }

    pub fn settings(&self) -> &ControllerSettings {
        &self.settings
    }

    pub fn neighbors(&self) -> &[usize] {
        self.ocp.layout().neighbors()
    }

    /// Input applied during the current interval.
    pub fn current_input(&self) -> Input {
        self.current_input
    }

    /// Input committed for the next sampling instant.
    pub fn committed_input(&self) -> Input {
        self.committed
    }

    pub fn warm_start(&self) -> (&[f64], &[f64]) {
        (&self.warm_z, &self.warm_gamma)
    }

    /// Last predicted trajectory.
    pub fn plan(&self) -> &[f64] {
        &self.plan
    }

    pub fn predicted_state(&self, stage: usize) -> State {
        self.ocp.state_at(&self.plan, stage)
    }

    fn fail(&mut self, e: impl std::fmt::Display) {
        if self.failed.is_none() {
            log::warn!("agent {}: {e}", self.agent());
            self.failed = Some(e.to_string());
        }
    }

    pub fn failed(&self) -> bool {
        self.failed.is_some()
    }

    /// Sets up the stage context and the warm start for a new step.
    pub fn prepare(&mut self, inputs: StepInputs) -> Result<(), ControllerError> {
        let horizon = self.ocp.layout().horizon();
        if inputs.references.len() != horizon + 1 || inputs.neighbor_references.len() != self.neighbors().len() {
            return Err(ControllerError::Inputs(self.agent()));
        }
        self.context = Some(stage_context(inputs, self.current_input));
        let (z, gamma) = warm_start_shift(&self.ocp, &self.warm_z, &self.warm_gamma, self.settings.warm_start);
        let state = self.admm.state_mut();
        state.z = z;
        state.gamma = gamma;
        self.failed = None;
        self.qp_inaccurate = 0;
        Ok(())
    }

    /// Linearizes at the current iterate and loads the QP into ADMM.
    pub fn linearize(&mut self, k: usize) {
        if self.failed() {
            return;
        }
        let ctx = self.context.as_ref().expect("prepare runs first");
        let result = self.ocp.evaluate(ctx, &self.admm.state().z).map_err(ControllerError::from).and_then(|sub| Ok(self.admm.begin_sqp(&sub, k)?));
        if let Err(e) = result {
            self.fail(e);
        }
    }

    pub fn local_step(&mut self) {
        if self.failed() {
            return;
        }
        match self.admm.local_step() {
            Ok(crate::qp::QpStatus::Solved) => {}
            Ok(_) => self.qp_inaccurate += 1,
            Err(e) => self.fail(e),
        }
    }

    pub fn copy_messages(&self, global_k: u64) -> Vec<AdmmMessage> {
        if self.failed() {
            return Vec::new();
        }
        self.admm.copy_messages(global_k)
    }

    /// Averaging from phase-one deliveries; stale deliveries only refresh
    /// the fallback values. Returns the number of missing payloads.
    pub fn accept_copies(&mut self, deliveries: &[Option<Delivery>], expected: &[Expected]) -> usize {
        if self.failed() {
            return expected.len();
        }
        let mut received = vec![None; deliveries.len()];
        for (slot, (d, e)) in deliveries.iter().zip(expected).enumerate() {
            let Some(d) = d else { continue };
            match self.admm.copy_payload(&d.message) {
                Ok((s, p)) if d.is_current(e) && s == slot => received[slot] = Some(p),
                Ok((s, p)) => self.admm.remember_copy(s, p),
                Err(err) => log::warn!("agent {}: dropped malformed copy: {err}", self.agent()),
            }
        }
        match self.admm.compute_average(&received) {
            Ok(missing) => missing,
            Err(e) => {
                self.fail(e);
                expected.len()
            }
        }
    }

    pub fn average_messages(&self, global_k: u64) -> Vec<AdmmMessage> {
        if self.failed() {
            return Vec::new();
        }
        self.admm.average_message(global_k)
    }

    pub fn accept_averages(&mut self, deliveries: &[Option<Delivery>], expected: &[Expected]) -> usize {
        if self.failed() {
            return expected.len();
        }
        let mut received = vec![None; deliveries.len()];
        for (slot, (d, e)) in deliveries.iter().zip(expected).enumerate() {
            let Some(d) = d else { continue };
            match self.admm.average_payload(&d.message) {
                Ok((s, v)) if d.is_current(e) && s == slot => received[slot] = Some(v),
                Ok((s, v)) => self.admm.remember_average(s, v),
                Err(err) => log::warn!("agent {}: dropped malformed average: {err}", self.agent()),
            }
        }
        match self.admm.finish_iteration(&received) {
            Ok(missing) => missing,
            Err(e) => {
                self.fail(e);
                expected.len()
            }
        }
    }

    pub fn finish_sqp(&mut self) {
        if !self.failed() {
            self.admm.finish_sqp();
        }
    }

    pub fn consensus_residual(&self) -> f64 {
        self.admm.state().consensus_residual()
    }

    /// Extracts and commits `u[1]`, or the previous plan's `u[2]` when the
    /// step failed or missed its deadline. Returns whether the fallback was
    /// used.
    pub fn conclude(&mut self, timely: bool) -> bool {
        let fallback_input = self.ocp.input_at(&self.plan, 2.min(self.ocp.layout().horizon() - 1));
        let use_fallback = self.failed() || !timely;
        if use_fallback {
            self.committed = self.ocp.settings().clamp_input(&fallback_input);
            if self.failed() {
                self.warm_gamma.iter_mut().for_each(|g| *g = 0.0);
                if !self.warm_z.iter().all(|v| v.is_finite()) {
                    self.warm_z.clone_from(&self.plan);
                }
            } else {
                self.store_iterate();
            }
        } else {
            self.store_iterate();
            let u1 = self.ocp.input_at(&self.plan, 1);
            self.committed = self.ocp.settings().clamp_input(&u1);
        }
        self.current_input = self.committed;
        use_fallback
    }

    fn store_iterate(&mut self) {
        let s = self.admm.state();
        self.warm_z.clone_from(&s.z);
        self.warm_gamma.clone_from(&s.gamma);
        self.plan.clone_from(&s.z);
    }
}

fn expected(neighbors: &[usize], kind: MessageKind, k: u64, l: u64) -> Vec<Expected> {
    neighbors.iter().map(|&sender| Expected { sender, kind, k, l }).collect()
}

/// Virtual clock and counters of one agent within a step.
#[derive(Debug, Clone, Default)]
struct AgentClock {
    now: f64,
    compute: f64,
    wait: f64,
}

impl AgentClock {
    fn work(&mut self, duration: f64) {
        self.now += duration;
        self.compute += duration;
    }
}

/// Receives with the deadline policy and advances the clock: to the last
/// arrival when everything came in, to the deadline otherwise.
fn timed_receive(
    bus: &mut Bus,
    agent: usize,
    clock: &mut AgentClock,
    step_start: f64,
    dt: f64,
    deadline: &DeadlineSettings,
    expected: &[Expected],
) -> Vec<Option<Delivery>> {
    let budget = deadline_policy(clock.now - step_start, dt, deadline.max_wait, deadline.fraction);
    let limit = clock.now + budget;
    let got = bus.receive_until(agent, limit, expected);
    let complete = got.iter().zip(expected).all(|(d, e)| d.as_ref().is_some_and(|d| d.is_current(e)));
    let until = if complete {
        got.iter().flatten().map(|d| d.deliver_time).fold(clock.now, f64::max)
    } else {
        limit
    };
    clock.wait += until - clock.now;
    clock.now = until;
    got
}

/// Runs one control step of every controller in lockstep. `step_start` is
/// the sampling instant of the step on the bus clock.
pub fn run_control_step(
    controllers: &mut [Controller],
    bus: &mut Bus,
    inputs: Vec<StepInputs>,
    step: usize,
    step_start: f64,
    dt: f64,
) -> Result<Vec<StepTelemetry>, ControllerError> {
    let n = controllers.len();
    if inputs.len() != n {
        return Err(ControllerError::Inputs(inputs.len()));
    }
    for (c, i) in controllers.iter_mut().zip(inputs) {
        c.prepare(i)?;
    }
    let settings = controllers.first().map(|c| c.settings.clone()).ok_or(ControllerError::Inputs(0))?;
    let mut clocks = vec![AgentClock { now: step_start, ..AgentClock::default() }; n];
    let mut tel: Vec<StepTelemetry> = controllers.iter().map(|c| StepTelemetry { step, agent: c.agent(), ..StepTelemetry::default() }).collect();
    let k_max = settings.sqp_iterations;
    for k in 0..k_max {
        let global_k = (step * k_max + k) as u64;
        for (c, clock) in controllers.iter_mut().zip(&mut clocks) {
            clock.work(settings.compute.linearize);
            c.linearize(global_k as usize);
        }
        for l in 0..settings.admm_iterations as u64 {
            for (c, clock) in controllers.iter_mut().zip(&mut clocks) {
                clock.work(settings.compute.local_qp);
                c.local_step();
                for m in c.copy_messages(global_k) {
                    bus.send(m, clock.now)?;
                }
            }
            for (i, c) in controllers.iter_mut().enumerate() {
                let exp = expected(c.neighbors(), MessageKind::CopyAndMultiplier, global_k, l);
                let got = timed_receive(bus, c.agent(), &mut clocks[i], step_start, dt, &settings.deadline, &exp);
                let missing = c.accept_copies(&got, &exp);
                tel[i].copy_comm_steps += 1;
                tel[i].copy_async_steps += usize::from(missing > 0);
                clocks[i].work(settings.compute.average);
                for m in c.average_messages(global_k) {
                    bus.send(m, clocks[i].now)?;
                }
            }
            for (i, c) in controllers.iter_mut().enumerate() {
                let exp = expected(c.neighbors(), MessageKind::Average, global_k, l);
                let got = timed_receive(bus, c.agent(), &mut clocks[i], step_start, dt, &settings.deadline, &exp);
                let missing = c.accept_averages(&got, &exp);
                tel[i].average_comm_steps += 1;
                tel[i].average_async_steps += usize::from(missing > 0);
            }
        }
        for (c, t) in controllers.iter_mut().zip(&mut tel) {
            t.consensus_residual = c.consensus_residual();
            c.finish_sqp();
        }
    }
    for (i, c) in controllers.iter_mut().enumerate() {
        clocks[i].work(settings.compute.extract);
        let mut commit = clocks[i].now;
        if settings.pad_to_interval {
            commit = commit.max(step_start + dt);
        }
        let timely = commit <= step_start + dt;
        let t = &mut tel[i];
        t.timely = timely;
        t.commit_delay = commit - step_start;
        t.compute_time = clocks[i].compute;
        t.wait_time = clocks[i].wait;
        t.error = c.failed.clone();
        t.qp_inaccurate = c.qp_inaccurate;
        t.fallback = c.conclude(timely);
    }
    Ok(tel)
}

/// Polls the shared bus until every expected message is in or the deadline
/// passes. Later polls replace older partial results.
fn wall_clock_receive(bus: &SharedBus, agent: usize, now: impl Fn() -> f64, limit: f64, expected: &[Expected]) -> Vec<Option<Delivery>> {
    let mut got: Vec<Option<Delivery>> = vec![None; expected.len()];
    loop {
        let polled = bus.lock().unwrap_or_else(|e| e.into_inner()).receive_until(agent, now(), expected);
        for (slot, d) in got.iter_mut().zip(polled) {
            if d.is_some() {
                *slot = d;
            }
        }
        let complete = got.iter().zip(expected).all(|(d, e)| d.as_ref().is_some_and(|d| d.is_current(e)));
        let t = now();
        if complete || t >= limit {
            return got;
        }
        std::thread::sleep(std::time::Duration::from_secs_f64((limit - t).min(POLL_INTERVAL)));
    }
}

const POLL_INTERVAL: f64 = 2e-4;

impl Controller {
    /// One control step against real time, for agents running on their own
    /// threads. Bus times are seconds since `epoch`; `step_start` is the
    /// sampling instant on that clock. The compute model is ignored.
    pub fn run_wall_clock_step(
        &mut self,
        bus: &SharedBus,
        inputs: StepInputs,
        step: usize,
        epoch: std::time::Instant,
        step_start: f64,
        dt: f64,
    ) -> Result<StepTelemetry, ControllerError> {
        let now = || epoch.elapsed().as_secs_f64();
        let mut tel = StepTelemetry { step, agent: self.agent(), ..StepTelemetry::default() };
        let settings = self.settings.clone();
        let deadline = settings.deadline;
        self.prepare(inputs)?;
        let mut wait = 0.0;
        let receive = |c: &Controller, kind: MessageKind, k: u64, l: u64, wait: &mut f64| {
            let exp = expected(c.neighbors(), kind, k, l);
            let t0 = now();
            let limit = t0 + deadline_policy(t0 - step_start, dt, deadline.max_wait, deadline.fraction);
            let got = wall_clock_receive(bus, c.agent(), now, limit, &exp);
            *wait += now() - t0;
            (got, exp)
        };
        let k_max = settings.sqp_iterations;
        for k in 0..k_max {
            let global_k = (step * k_max + k) as u64;
            self.linearize(global_k as usize);
            for l in 0..settings.admm_iterations as u64 {
                self.local_step();
                for m in self.copy_messages(global_k) {
                    bus.lock().unwrap_or_else(|e| e.into_inner()).send(m, now())?;
                }
                let (got, exp) = receive(self, MessageKind::CopyAndMultiplier, global_k, l, &mut wait);
                let missing = self.accept_copies(&got, &exp);
                tel.copy_comm_steps += 1;
                tel.copy_async_steps += usize::from(missing > 0);
                for m in self.average_messages(global_k) {
                    bus.lock().unwrap_or_else(|e| e.into_inner()).send(m, now())?;
                }
                let (got, exp) = receive(self, MessageKind::Average, global_k, l, &mut wait);
                let missing = self.accept_averages(&got, &exp);
                tel.average_comm_steps += 1;
                tel.average_async_steps += usize::from(missing > 0);
            }
            tel.consensus_residual = self.consensus_residual();
            self.finish_sqp();
        }
        if settings.pad_to_interval {
            let remaining = step_start + dt - now();
            if remaining > 0.0 {
                std::thread::sleep(std::time::Duration::from_secs_f64(remaining));
            }
        }
        let commit = now();
        tel.timely = commit <= step_start + dt;
        tel.commit_delay = commit - step_start;
        tel.wait_time = wait;
        tel.compute_time = (tel.commit_delay - wait).max(0.0);
        tel.error = self.failed.clone();
        tel.qp_inaccurate = self.qp_inaccurate;
        tel.fallback = self.conclude(tel.timely);
        Ok(tel)
    }
}
