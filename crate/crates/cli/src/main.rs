mod commands;
mod output;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use signalrho::inversion::Panel;

use output::{config_hash, pretty, Artifacts};

pub const SEED_ENV: &str = "SIGNALRHO_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<signalrho::Error> for CliError {
    fn from(e: signalrho::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "signalrho", version, about = "Signal-resolved feedback master equations from JSON scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PanelArg {
    B,
    C,
    D,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Scenario JSON, or a manifest.json from an earlier run.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory (default: the scenario's output.dir, else "out").
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.dt.
    #[arg(long)]
    dt: Option<f64>,
    /// Overrides run.trajectories.
    #[arg(long)]
    ntraj: Option<usize>,
    #[arg(long, value_enum)]
    panel: Option<PanelArg>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse and validate a scenario.
    Validate(Common),
    /// Steady state via the Ω, coupled, combined or discrete route.
    Steady(Common),
    /// Time evolution with the coupled equations or on a τ grid.
    Evolve(Common),
    /// Monte Carlo trajectories and ensemble averages.
    Trajectories(Common),
    /// The population-inversion example and its parameter sweeps.
    Inversion(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Validate(c) => ("validate", c),
            Command::Steady(c) => ("steady", c),
            Command::Evolve(c) => ("evolve", c),
            Command::Trajectories(c) => ("trajectories", c),
            Command::Inversion(c) => ("inversion", c),
        }
    }
}

fn flag<T: serde::de::DeserializeOwned>(flags: &Option<Value>, key: &str) -> Option<T> {
    flags
        .as_ref()
        .and_then(|f| f.get(key))
        .filter(|v| !v.is_null())
        .and_then(|v| serde_json::from_value(v.clone()).ok())
}

fn resolve_seed(cli: Option<u64>, manifest: Option<u64>, scenario: Option<u64>) -> Result<Option<u64>, CliError> {
    if let Some(s) = cli {
        return Ok(Some(s));
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        let s = v
            .trim()
            .parse::<u64>()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned 64-bit integer")))?;
        return Ok(Some(s));
    }
    Ok(manifest.or(scenario))
}

fn run(command: &str, args: &Common) -> Result<(), CliError> {
    let started = Instant::now();
    let input = scenario::read_input(&args.scenario)?;
    let mf = &input.manifest_flags;
    let dt = args.dt.or(flag(mf, "dt"));
    let ntraj = args.ntraj.or(flag(mf, "ntraj"));
    let panel_name: Option<String> = args
        .panel
        .map(|p| format!("{p:?}").to_lowercase())
        .or(flag(mf, "panel"));
    let panel = match panel_name.as_deref() {
        None => None,
        Some("b") => Some(Panel::B),
        Some("c") => Some(Panel::C),
        Some("d") => Some(Panel::D),
        Some(other) => return Err(CliError::Config(format!("unknown panel {other:?}"))),
    };
    if panel.is_some() && command != "inversion" {
        return Err(CliError::Config("--panel only applies to the inversion command".into()));
    }
    let mut sc = input.scenario.clone();
    if let Some(dt) = dt {
        sc.run.dt = Some(dt);
    }
    if let Some(n) = ntraj {
        sc.run.trajectories = Some(n);
    }
    let seed = resolve_seed(args.seed, flag(mf, "seed"), sc.run.seed)?;
    let built_at = Instant::now();
    let built = if command == "inversion" && sc.inversion.is_none() && sc.model.is_none() {
        None
    } else {
        Some(sc.build()?)
    };
    let build_time = built_at.elapsed().as_secs_f64();

    if command == "validate" {
        let b = built.as_ref().expect("validate builds the scenario");
        println!(
            "PASS {}: dimension {}, channels {:?}, {}",
            args.scenario.display(),
            b.dim,
            b.schedule.channels(),
            if b.schedule.is_tau_independent() { "τ-independent feedback" } else { "τ-dependent feedback" }
        );
        return Ok(());
    }

    let compute_at = Instant::now();
    let tables = match command {
        "steady" => commands::steady(built.as_ref().expect("built"), &sc)?,
        "evolve" => commands::evolve(built.as_ref().expect("built"), &sc)?,
        "trajectories" => {
            let seed = seed.ok_or_else(|| {
                CliError::Config(format!("trajectories needs a seed: pass --seed or set {SEED_ENV}"))
            })?;
            commands::trajectories(built.as_ref().expect("built"), &sc, seed)?
        }
        "inversion" => commands::inversion(&sc, panel)?,
        other => unreachable!("unknown command {other}"),
    };
    let compute_time = compute_at.elapsed().as_secs_f64();

    let dir = args
        .out
        .clone()
        .or_else(|| sc.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let artifacts = Artifacts::new(&dir)?;
    let mut outputs = Vec::new();
    for t in &tables {
        let hash = artifacts.write(&t.name, &t.render())?;
        outputs.push(json!({ "file": t.name, "sha256": hash, "rows": t.rows.len() }));
        println!("wrote {}", dir.join(&t.name).display());
    }
    let flags = json!({
        "seed": if command == "trajectories" { json!(seed) } else { Value::Null },
        "dt": dt,
        "ntraj": ntraj,
        "panel": panel_name,
    });
    let manifest = json!({
        "tool": "signalrho",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config_hash": config_hash(command, &input.raw, &flags),
        "seed": flags["seed"],
        "flags": flags,
        "scenario": input.raw,
        "outputs": outputs,
    });
    artifacts.write("manifest.json", &pretty(&manifest))?;
    let timings = json!({
        "build_seconds": build_time,
        "compute_seconds": compute_time,
        "total_seconds": started.elapsed().as_secs_f64(),
    });
    artifacts.write("timings.json", &pretty(&timings))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, args) = cli.command.parts();
    match run(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("signalrho {command}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
