use swarm_dmpc::controller::ComputeModel;
use swarm_dmpc::harness::{preset, run_scenario, timing_stats, ClockMode, ControlMode, NoiseSpec, ScenarioSpec};
use swarm_dmpc::model::{ReferenceSchedule, SetpointSegment};
use swarm_dmpc::netsim::LinkProfile;

fn idle() -> ComputeModel {
    ComputeModel { linearize: 0.0, local_qp: 0.0, average: 0.0, extract: 0.0 }
}

fn pair(duration: f64) -> ScenarioSpec {
    let mut s = preset("rectangle").unwrap();
    s.agents.truncate(2);
    s.agents[0].initial = [0.3, 0.3, 0.0];
    s.agents[1].initial = [0.6, 0.3, 0.0];
    s.references = ReferenceSchedule::Setpoints {
        segments: vec![SetpointSegment { start: 0.0, poses: vec![[0.35, 0.32, 0.0], [0.62, 0.28, 0.0]] }],
    };
    s.horizon = 10;
    s.custom_timing = true;
    s.duration = duration;
    s.noise = NoiseSpec::none();
    s
}

#[test]
fn converged_admm_tracks_the_centralized_controller() {
    let mut s = pair(5.0);
    s.controller.admm_iterations = 1000;
    s.controller.compute = idle();
    s.network = LinkProfile::ideal();
    let distributed = run_scenario(&s).unwrap();
    s.mode = ControlMode::Centralized;
    let central = run_scenario(&s).unwrap();
    assert_eq!(distributed.trace.len(), central.trace.len());
    assert_eq!(distributed.trace.len(), 200);
    let worst = distributed
        .trace
        .iter()
        .zip(&central.trace)
        .map(|(a, b)| (a.ux - b.ux).abs().max((a.uy - b.uy).abs()).max((a.uyaw - b.uyaw).abs()))
        .fold(0.0, f64::max);
    assert!(worst <= 1e-3, "largest input gap {worst:.3e}");
}

#[test]
fn more_iterations_reduce_consensus_error_at_every_step() {
    let mut s = preset("rectangle").unwrap();
    s.noise = NoiseSpec::none();
    s.duration = 2.0;
    s.network = LinkProfile::ideal();
    let residuals = |l: usize| {
        let mut s = s.clone();
        s.controller.admm_iterations = l;
        let out = run_scenario(&s).unwrap();
        let agents = s.agent_count();
        out.telemetry.chunks(agents).map(|c| c.iter().map(|t| t.consensus_residual).fold(0.0, f64::max)).collect::<Vec<_>>()
    };
    let (many, few) = (residuals(30), residuals(2));
    assert_eq!(many.len(), few.len());
    for (step, (a, b)) in many.iter().zip(&few).enumerate() {
        assert!(a < b, "step {step}: {a:.3e} vs {b:.3e}");
    }
}

#[test]
fn asynchronous_steps_grow_with_drop_rate() {
    let mut s = preset("rectangle").unwrap();
    s.duration = 2.0;
    let counts: Vec<usize> = [0.0, 0.05, 0.2]
        .iter()
        .map(|&p| {
            let mut s = s.clone();
            s.network = LinkProfile::offboard().with_drop_probability(p);
            let out = run_scenario(&s).unwrap();
            out.telemetry.iter().map(|t| t.copy_async_steps + t.average_async_steps).sum()
        })
        .collect();
    assert_eq!(counts[0], 0);
    assert!(counts[0] <= counts[1] && counts[1] <= counts[2], "{counts:?}");
    assert!(counts[2] > 0);
}

#[test]
fn same_seed_reproduces_every_log() {
    let mut s = preset("rectangle").unwrap();
    s.duration = 1.5;
    s.network = LinkProfile::onboard().with_drop_probability(0.05);
    s.controller.admm_iterations = 4;
    let a = run_scenario(&s).unwrap();
    let b = run_scenario(&s).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.telemetry, b.telemetry);
    assert_eq!(a.events, b.events);
    assert_eq!(a.network, b.network);
    assert_eq!(a.summary, b.summary);
    s.seed += 1;
    let c = run_scenario(&s).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn untimely_steps_are_exactly_the_late_ones() {
    let mut s = preset("rectangle").unwrap();
    s.duration = 1.0;
    let mut late_counts = Vec::new();
    for local_qp in [1e-4, 1.4e-3, 2e-3] {
        s.controller.compute.local_qp = local_qp;
        let out = run_scenario(&s).unwrap();
        for t in &out.telemetry {
            assert_eq!(t.timely, t.commit_delay <= s.dt, "step {} agent {}", t.step, t.agent);
            assert_eq!(t.fallback, !t.timely || t.error.is_some());
        }
        let late = out.telemetry.iter().filter(|t| !t.timely).count();
        assert_eq!(timing_stats(&out.telemetry).fallback_steps, late);
        late_counts.push((late, out.telemetry.len()));
    }
    assert_eq!(late_counts[0].0, 0);
    assert_eq!(late_counts[2].0, late_counts[2].1);
}

#[test]
fn wall_clock_run_converges() {
    let mut s = preset("rectangle").unwrap();
    s.noise = NoiseSpec::none();
    s.duration = 3.0;
    s.clock = ClockMode::WallClock;
    let start = std::time::Instant::now();
    let out = run_scenario(&s).unwrap();
    assert!(start.elapsed().as_secs_f64() >= 2.9);
    assert!(out.summary.aborted.is_none());
    assert_eq!(out.telemetry.len(), 60 * s.agent_count());
    let errors = out.position_errors();
    assert!(errors.last().unwrap() < &(0.2 * errors[0]), "{} -> {}", errors[0], errors.last().unwrap());
    let sent = out.summary.messages_sent;
    assert_eq!(sent as usize, out.network.len());
    assert!(sent > 0);

    s.mode = ControlMode::Centralized;
    assert!(run_scenario(&s).is_err());
}
