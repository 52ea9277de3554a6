use serde::{Deserialize, Serialize};

use crate::controller::StepTelemetry;
use crate::model::{AgentReference, Input, State};
use crate::ocp::{stage_cost, WeightSet};

use super::HarnessError;

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Averaged closed-loop cost `(1/T_f) Σ_t Δt ℓ(x(t), u(t))` with
/// `T_f = t_n Δt`. `None` for an empty trace.
pub fn closed_loop_cost(
    states: &[Vec<State>],
    inputs: &[Vec<Input>],
    references: &[Vec<AgentReference>],
    weights: &WeightSet,
    dt: f64,
) -> Result<Option<f64>, HarnessError> {
    let steps = states.len();
    if inputs.len() != steps || references.len() != steps {
        return Err(HarnessError::TraceLength { expected: steps, found: inputs.len().min(references.len()) });
    }
    if steps == 0 {
        return Ok(None);
    }
    let agents = weights.agent_count();
    let mut total = 0.0;
    for ((x, u), r) in states.iter().zip(inputs).zip(references) {
        if x.len() != agents || u.len() != agents || r.len() != agents {
            return Err(HarnessError::TraceLength { expected: agents, found: x.len().min(u.len()).min(r.len()) });
        }
        total += dt * (0..agents).map(|i| stage_cost(x, &u[i], r, weights, i)).sum::<f64>();
    }
    Ok(Some(total / (steps as f64 * dt)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SafetyCounts {
    /// Sampling instants with some distance below `d_min`, summed over the
    /// neighbor and obstacle families.
    pub violations: usize,
    /// `violations / t_n`.
    pub violations_per_step: f64,
    /// Onsets of distances below the body diameter.
    pub collisions: usize,
    pub min_agent_distance: Option<f64>,
    pub min_obstacle_distance: Option<f64>,
}

/// Counts constraint violations and collisions over position traces.
/// `positions[t][i]` is agent `i` at instant `t`; every pair of agents is
/// checked.
pub fn count_violations_and_collisions(
    positions: &[Vec<[f64; 2]>],
    obstacle: Option<&[[f64; 2]]>,
    min_distance: f64,
    body_diameter: f64,
) -> SafetyCounts {
    let mut out = SafetyCounts::default();
    let lower = |slot: &mut Option<f64>, d: f64| *slot = Some(slot.map_or(d, |m: f64| m.min(d)));
    let mut colliding: std::collections::BTreeSet<(usize, usize)> = Default::default();
    let obstacle_id = usize::MAX;
    for (t, p) in positions.iter().enumerate() {
        let mut pair_violation = false;
        let mut now_colliding = std::collections::BTreeSet::new();
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let d = distance(p[i], p[j]);
                lower(&mut out.min_agent_distance, d);
                pair_violation |= d < min_distance;
                if d < body_diameter {
                    now_colliding.insert((i, j));
                }
            }
        }
        let mut obstacle_violation = false;
        if let Some(o) = obstacle.and_then(|o| o.get(t)) {
            for (i, pi) in p.iter().enumerate() {
                let d = distance(*pi, *o);
                lower(&mut out.min_obstacle_distance, d);
                obstacle_violation |= d < min_distance;
                if d < body_diameter {
                    now_colliding.insert((i, obstacle_id));
                }
            }
        }
        out.violations += usize::from(pair_violation) + usize::from(obstacle_violation);
        out.collisions += now_colliding.difference(&colliding).count();
        colliding = now_colliding;
    }
    if !positions.is_empty() {
        out.violations_per_step = out.violations as f64 / positions.len() as f64;
    }
    out
}

/// Table-style optimizer statistics over all agents and steps, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct TimingStats {
    pub timely_percent: f64,
    pub async_copy_percent: f64,
    pub async_average_percent: f64,
    pub compute_percent: f64,
    pub wait_percent: f64,
    pub fallback_steps: usize,
    pub failed_steps: usize,
}

fn percent(part: f64, whole: f64) -> f64 {
    if whole > 0.0 {
        100.0 * part / whole
    } else {
        0.0
    }
}

pub fn timing_stats(telemetry: &[StepTelemetry]) -> TimingStats {
    let sum = |f: fn(&StepTelemetry) -> f64| telemetry.iter().map(f).sum::<f64>();
    let compute = sum(|t| t.compute_time);
    let wait = sum(|t| t.wait_time);
    TimingStats {
        timely_percent: percent(sum(|t| f64::from(u8::from(t.timely))), telemetry.len() as f64),
        async_copy_percent: percent(sum(|t| t.copy_async_steps as f64), sum(|t| t.copy_comm_steps as f64)),
        async_average_percent: percent(sum(|t| t.average_async_steps as f64), sum(|t| t.average_comm_steps as f64)),
        compute_percent: percent(compute, compute + wait),
        wait_percent: percent(wait, compute + wait),
        fallback_steps: telemetry.iter().filter(|t| t.fallback).count(),
        failed_steps: telemetry.iter().filter(|t| t.error.is_some()).count(),
    }
}
