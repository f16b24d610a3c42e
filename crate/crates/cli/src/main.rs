//! `quadgrasp --scenario FILE --mode {serve|run|eval}`.
//!
//! Exit codes: 0 success, 2 the mission or evaluation did not succeed, 3
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use quadgrasp::eval::{run_eval, EvalConfig};
use quadgrasp::metrics::{rate_by_class, to_ndjson, MetricsSummary};
use quadgrasp::mission::{trace_to_jsonl, Mission, MissionRunner, RunEnd};
use quadgrasp::world::{Scenario, Simulator};
use quadgrasp_bridge::{parse_script, ServeConfig, SessionConfig};

const EXIT_FAULT: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Serve the WebSocket bridge on `--port`.
    Serve,
    /// Run one mission headless from `--script`.
    Run,
    /// Repeat the grasp phase `--trials` times and write metrics.
    Eval,
}

#[derive(Debug, Parser)]
#[command(name = "quadgrasp", version, about = "Quadruped fetch-and-grasp simulator")]
struct Cli {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, default_value_t = 8765)]
    port: u16,
    /// Master seed; defaults to the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 12)]
    trials: u32,
    /// Operator script (JSON lines) for run mode.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// In eval mode, run the whole mission from home for every trial.
    #[arg(long)]
    full: bool,
    /// Grasp execution noise override (m per axis).
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Simulated seconds per wall-clock second in serve mode.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Fault(String),
}

fn config(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<PathBuf, Failure> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| config(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn run(cli: &Cli, scenario: Scenario, seed: u64) -> Result<(), Failure> {
    let path = cli.script.as_ref().ok_or_else(|| config("run mode needs --script"))?;
    let text = std::fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
    let rooms: Vec<String> = scenario.scene.rooms.iter().map(|r| r.name.clone()).collect();
    let script = parse_script(&text, &rooms).map_err(|e| config(format!("{}: {e}", path.display())))?;
    std::fs::create_dir_all(&cli.out).map_err(|e| config(format!("{}: {e}", cli.out.display())))?;

    let mut runner = MissionRunner::new(Simulator::new(scenario, seed), Mission::default(), script);
    let end = runner.run();
    write_file(&cli.out, "trace.jsonl", &trace_to_jsonl(&runner.mission.trace))?;
    write_file(&cli.out, "metrics.ndjson", &to_ndjson(&runner.mission.metrics))?;
    let result = serde_json::json!({
        "result": end,
        "state": runner.mission.state(),
        "sim_time": runner.sim.time,
        "grasps": runner.mission.metrics,
    });
    write_file(&cli.out, "result.json", &(serde_json::to_string_pretty(&result).expect("result serializes") + "\n"))?;
    println!("{}", serde_json::to_string(&result).expect("result serializes"));
    match end {
        RunEnd::Done => Ok(()),
        RunEnd::Faulted { reason } => Err(Failure::Fault(format!("faulted: {reason}"))),
        RunEnd::Stopped => Err(Failure::Fault(format!("stopped by operator at t={:.2} s, state Idle", runner.sim.time))),
        RunEnd::Stalled { reason, .. } => Err(Failure::Fault(format!("timed out: {reason}"))),
        RunEnd::TimedOut { state } => Err(Failure::Fault(format!(
            "timed out: run limit {:.0} s reached in {state}",
            runner.max_time
        ))),
    }
}

fn eval(cli: &Cli, scenario: Scenario, seed: u64) -> Result<(), Failure> {
    if cli.noise_sigma.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
        return Err(config("--noise-sigma must be a non-negative number"));
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| config(format!("{}: {e}", cli.out.display())))?;
    let cfg = EvalConfig {
        trials: cli.trials,
        seed,
        full: cli.full,
        noise_sigma: cli.noise_sigma,
    };
    let records = run_eval(&scenario, &cfg).map_err(config)?;
    let path = write_file(&cli.out, "metrics.ndjson", &to_ndjson(&records))?;
    for (class, n, ok) in rate_by_class(&records) {
        println!("{class:<12} {ok:>4}/{n:<4} {:.3}", ok as f64 / n as f64);
    }
    let s = MetricsSummary::of(&records);
    println!(
        "{:<12} {:>4}/{:<4} {:.3}",
        "overall",
        s.successes,
        s.trials,
        s.success_rate.unwrap_or(0.0)
    );
    println!("metrics written to {}", path.display());
    Ok(())
}

fn serve(cli: &Cli, scenario: Scenario, seed: u64) -> Result<(), Failure> {
    let cfg = ServeConfig {
        port: cli.port,
        session: SessionConfig {
            seed,
            ..Default::default()
        },
        speed: cli.speed,
        ..Default::default()
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Fault(e.to_string()))?;
    rt.block_on(quadgrasp_bridge::serve(scenario, cfg)).map_err(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = Scenario::from_path(&cli.scenario)
        .map_err(|e| config(format!("{}: {e}", cli.scenario.display())))
        .and_then(|scenario| {
            let seed = cli.seed.unwrap_or(scenario.seed);
            match cli.mode {
                Mode::Serve => serve(&cli, scenario, seed),
                Mode::Run => run(&cli, scenario, seed),
                Mode::Eval => eval(&cli, scenario, seed),
            }
        });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Fault(reason)) => {
            eprintln!("quadgrasp: {reason}");
            ExitCode::from(EXIT_FAULT)
        }
        Err(Failure::Config(reason)) => {
            eprintln!("quadgrasp: {reason}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
