use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swarm_dmpc::harness::{preset, preset_names, run_scenario, write_outputs, ClockMode, ControlMode, HarnessError, NoiseSpec, ScenarioSpec};

/// Closed-loop simulator for cooperative distributed MPC of planar swarms.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario with the decentralized controller.
    Run(RunArgs),
    /// Run a scenario with the centralized reference controller.
    Baseline(RunArgs),
    /// Run the acceptance suite.
    Selftest {
        /// Only run these criteria (1-13).
        #[arg(long, value_delimiter = ',')]
        only: Vec<usize>,
    },
    /// List the built-in scenarios.
    Presets,
    /// Print a built-in scenario as TOML.
    Show { name: String },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML) or the name of a built-in scenario.
    scenario: String,
    /// Directory for the logs; defaults to `runs/<scenario name>`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// ADMM iterations per SQP iteration.
    #[arg(long)]
    l_max: Option<usize>,
    /// SQP iterations per control step.
    #[arg(long)]
    k_max: Option<usize>,
    /// ADMM penalty parameter.
    #[arg(long)]
    rho: Option<f64>,
    /// Network profile: offboard, onboard or ideal.
    #[arg(long)]
    profile: Option<String>,
    /// Message drop probability applied to every link.
    #[arg(long)]
    drop: Option<f64>,
    /// Simulated duration in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Disable measurement, process and initial-state noise.
    #[arg(long)]
    no_noise: bool,
    /// Run every agent on its own thread, paced by the real clock.
    #[arg(long)]
    wall_clock: bool,
}

fn load(arg: &str) -> Result<ScenarioSpec, HarnessError> {
    match preset(arg) {
        Some(spec) => Ok(spec),
        None => ScenarioSpec::load(arg.as_ref()),
    }
}

fn configure(args: &RunArgs, mode: ControlMode) -> Result<ScenarioSpec, HarnessError> {
    let mut spec = load(&args.scenario)?;
    spec.mode = mode;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(l) = args.l_max {
        spec.controller.admm_iterations = l;
    }
    if let Some(k) = args.k_max {
        spec.controller.sqp_iterations = k;
    }
    if let Some(rho) = args.rho {
        spec.controller.rho = rho;
    }
    if let Some(name) = &args.profile {
        spec.set_profile(name)?;
    }
    if let Some(p) = args.drop {
        spec.network = spec.network.with_drop_probability(p);
    }
    if let Some(d) = args.duration {
        spec.duration = d;
    }
    if args.no_noise {
        spec.noise = NoiseSpec::none();
    }
    if args.wall_clock {
        spec.clock = ClockMode::WallClock;
    }
    spec.validate()?;
    Ok(spec)
}

fn run(args: &RunArgs, mode: ControlMode) -> ExitCode {
    let spec = match configure(args, mode) {
        Ok(spec) => spec,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&spec.name));
    log::info!("running {} for {} steps", spec.name, spec.steps());
    let output = match run_scenario(&spec) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if e.is_config() { 1 } else { 2 });
        }
    };
    if let Err(e) = write_outputs(&output, &out_dir) {
        eprintln!("error: could not write logs to {}: {e}", out_dir.display());
        return ExitCode::from(2);
    }
    match serde_json::to_string_pretty(&output.summary) {
        Ok(text) => println!("{text}"),
        Err(e) => eprintln!("error: {e}"),
    }
    eprintln!("logs written to {}", out_dir.display());
    if output.summary.aborted.is_some() {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run(&args, ControlMode::Distributed),
        Command::Baseline(args) => run(&args, ControlMode::Centralized),
        Command::Selftest { only } => {
            let results = swarm_dmpc::acceptance::run_with(&only, |r| println!("{r}"));
            if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
        Command::Show { name } => match preset(&name).map(|s| s.to_toml()) {
            Some(Ok(text)) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Some(Err(e)) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
            None => {
                eprintln!("error: unknown scenario {name:?}");
                ExitCode::from(1)
            }
        },
    }
}
