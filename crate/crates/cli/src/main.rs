//! `elastic-sim`: run one scenario, or compare baselines on it.
//!
//! Exit status: 0 on success, 1 on I/O failure, 2 on a configuration error,
//! 3 when the simulation detects an internal invariant violation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use elastic_core::bench::{comparison_table, run_baseline, sort_rows, ComparisonRow};
use elastic_core::scenario::{Baseline, Scenario};
use elastic_core::sim::{self, SimError};

#[derive(Debug, Parser)]
#[command(name = "elastic-sim", version, about = "Deterministic elastic pool simulator")]
struct Args {
    /// Scenario file (TOML, flat keys).
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; falls back to the scenario's `output` key, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated baselines to compare, at least two.
    #[arg(long, value_delimiter = ',')]
    compare: Option<Vec<String>>,
    #[arg(long, default_value = "warn")]
    log_level: log::LevelFilter,
}

enum Failure {
    Io(String),
    Config(String),
    Invariant(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Invariant(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Config(m) | Failure::Invariant(m) => m,
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(m) => Failure::Config(m),
            other => Failure::Invariant(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn load(args: &Args) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(&args.scenario).map_err(io_err(&args.scenario))?;
    let mut scenario =
        Scenario::parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", args.scenario.display())))?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    Ok(scenario)
}

fn parse_baselines(names: &[String]) -> Result<Vec<Baseline>, Failure> {
    let baselines = names
        .iter()
        .map(|n| n.parse::<Baseline>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::Config)?;
    if baselines.len() < 2 {
        return Err(Failure::Config(format!(
            "--compare needs at least two baselines, got {}",
            baselines.len()
        )));
    }
    Ok(baselines)
}

fn run(args: &Args) -> Result<(), Failure> {
    let baselines = args.compare.as_deref().map(parse_baselines).transpose()?;
    let scenario = load(args)?;
    let out_dir = args
        .out
        .clone()
        .or_else(|| scenario.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));

    let Some(baselines) = baselines else {
        let out = sim::run(&scenario)?;
        sim::write_outputs(&out, &out_dir).map_err(io_err(&out_dir))?;
        print!("{}", sim::summary_text(&out));
        return Ok(());
    };

    let mut rows = Vec::new();
    for b in baselines {
        log::info!("running baseline {b}");
        let out = run_baseline(&scenario, b)?;
        let dir = out_dir.join(b.name());
        sim::write_outputs(&out, &dir).map_err(io_err(&dir))?;
        rows.push(ComparisonRow::from_run(b, &out));
    }
    sort_rows(&mut rows);
    let table = comparison_table(&rows);
    fs::write(out_dir.join("comparison.txt"), &table).map_err(io_err(&out_dir))?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    env_logger::Builder::new().filter_level(args.log_level).init();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
