use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use shelfbot_bridge::{serve, BridgeConfig};
use shelfbot_sim::benchmark::run_suite;
use shelfbot_sim::metrics::MetricsAccumulator;
use shelfbot_sim::record::write_jsonl;
use shelfbot_sim::scenario::OperatorSource;
use shelfbot_sim::{RunMetrics, Scenario, Simulation};

const EXIT_TASK_FAILED: u8 = 1;
const EXIT_SPEC_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "shelfbot", version, about = "Shared-control shelf-picking simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Replay this operator trace instead of the scenario's source.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Disable goal assistance (pure teleoperation).
        #[arg(long)]
        no_assist: bool,
        /// Write the per-tick log here as line-delimited JSON.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Serve a live operator console on this localhost port.
        #[arg(long, env = "SHELFBOT_BRIDGE_PORT")]
        bridge: Option<u16>,
    },
    /// Run a benchmark suite directory (containing suite.toml).
    Benchmark { suite: PathBuf },
    /// Check a scenario file and report problems.
    Validate { scenario: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            scenario,
            seed,
            trace,
            no_assist,
            log,
            bridge,
        } => run(&scenario, seed, trace, no_assist, log, bridge),
        Command::Benchmark { suite } => match run_suite(&suite) {
            Ok(report) => {
                print!("{}", report.table());
                if report.passed() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(EXIT_TASK_FAILED)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_SPEC_ERROR)
            }
        },
        Command::Validate { scenario } => match Scenario::load(&scenario) {
            Ok(s) => {
                println!("{}: ok ({} ticks at {} Hz)", s.spec.name, s.ticks(), s.spec.tick_hz);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_SPEC_ERROR)
            }
        },
    }
}

fn load(
    path: &Path,
    seed: Option<u64>,
    trace: Option<PathBuf>,
    no_assist: bool,
    live: bool,
) -> Result<Scenario, String> {
    let mut scenario = Scenario::load(path).map_err(|e| e.to_string())?;
    if trace.is_some() || live {
        let mut spec = scenario.spec.clone();
        if let Some(t) = trace {
            let abs = std::path::absolute(&t).map_err(|e| format!("{}: {e}", t.display()))?;
            spec.operator.source = OperatorSource::Trace;
            spec.operator.trace = Some(abs);
        }
        if live {
            spec.operator.source = OperatorSource::Live;
        }
        scenario = Scenario::from_spec(spec, scenario.base_dir.clone()).map_err(|e| e.to_string())?;
    }
    if let Some(seed) = seed {
        scenario = scenario.with_seed(seed);
    }
    if no_assist {
        scenario = scenario.with_assist(false);
    }
    Ok(scenario)
}

fn run(
    path: &Path,
    seed: Option<u64>,
    trace: Option<PathBuf>,
    no_assist: bool,
    log: Option<PathBuf>,
    bridge: Option<u16>,
) -> ExitCode {
    let scenario = match load(path, seed, trace, no_assist, bridge.is_some()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_SPEC_ERROR);
        }
    };

    let (records, metrics) = if let Some(port) = bridge {
        let server = match serve(port, BridgeConfig::default()) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: cannot listen on port {port}: {e}");
                return ExitCode::from(EXIT_SPEC_ERROR);
            }
        };
        eprintln!("bridge listening on {}", server.local_addr());
        let mut sim = match Simulation::with_bridge(&scenario, server.handle()) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_SPEC_ERROR);
            }
        };
        let period = Duration::from_secs_f64(scenario.dt);
        let mut next = Instant::now();
        let mut records = Vec::new();
        let mut acc = MetricsAccumulator::new();
        while !sim.finished() {
            let r = sim.step();
            acc.push(&r);
            records.push(r);
            next += period;
            std::thread::sleep(next.saturating_duration_since(Instant::now()));
        }
        (records, acc.finish())
    } else {
        match Simulation::new(&scenario) {
            Ok(mut sim) => {
                let out = sim.run();
                (out.records, out.metrics)
            }
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_SPEC_ERROR);
            }
        }
    };

    if let Some(log) = log {
        let written = File::create(&log).and_then(|f| write_jsonl(&mut BufWriter::new(f), &records));
        if let Err(e) = written {
            eprintln!("error: cannot write {}: {e}", log.display());
            return ExitCode::from(EXIT_SPEC_ERROR);
        }
    }
    summarize(&scenario, &metrics);
    if scenario.goals.is_empty() || metrics.completed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_TASK_FAILED)
    }
}

fn fmt_opt(v: Option<f64>, unit: &str) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4} {unit}"))
}

fn summarize(scenario: &Scenario, m: &RunMetrics) {
    println!("scenario           {}", scenario.spec.name);
    println!("ticks              {}", m.ticks);
    println!("completion time    {}", fmt_opt(m.completion_time, "s"));
    println!("goal error left    {}", fmt_opt(m.terminal_goal_error[0], "m"));
    println!("goal error right   {}", fmt_opt(m.terminal_goal_error[1], "m"));
    println!("far-field rms      {}", fmt_opt(m.far_field_rms, "m"));
    println!("min clearance      {}", fmt_opt(m.min_clearance, "m"));
    println!("coupled variation  {}", fmt_opt(m.coupled_distance_variation, "m"));
    println!("collisions         {}", m.collisions);
    println!("solver failures    {}", m.solver_failures);
    println!("ik failures        {}", m.ik_failures);
}
