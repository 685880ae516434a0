//! Command-line interface.
//!
//! Exit codes: 0 success, 1 invalid scenario, 2 I/O or usage problem,
//! 3 simulation failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::domain::{DomainError, Scenario};
use crate::sim::{compare_scenarios, plan_initial_topology, run_scenario, SimError};

const EXIT_OK: u8 = 0;
const EXIT_INVALID: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_SIM: u8 = 3;

#[derive(Parser)]
#[command(
    name = "vcsim",
    version,
    about = "Deterministic simulator for hybrid elastic virtual clusters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and report the first problem found.
    Validate(ValidateArgs),
    /// Run a scenario to quiescence and write the selected outputs.
    Run(RunArgs),
    /// Run two scenarios under the same seed and report the differences.
    Compare(CompareArgs),
    /// Plan the overlay for the initial deployment without simulating.
    PlanTopology(PlanTopologyArgs),
}

#[derive(Args)]
struct ValidateArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory the output files are written into.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Which outputs to write (default: all).
    #[arg(long, value_delimiter = ',')]
    emit: Option<Vec<Emit>>,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Variant scenario file to compare against the baseline.
    #[arg(long)]
    against: PathBuf,
    /// Seed override applied to both runs.
    #[arg(long)]
    seed: Option<u64>,
    /// Optional directory; when given, the report is also written to
    /// compare.json there.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanTopologyArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Optional directory; when given, the plan is also written to
    /// topology.json there.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Emit {
    Events,
    Timeline,
    Summary,
    Topology,
}

/// Parses `args` and runs the requested command, returning the process exit
/// code.
pub fn main_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message (help/version go to stdout).
            let code = if e.use_stderr() { EXIT_IO } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Validate(args) => cmd_validate(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::PlanTopology(args) => cmd_plan_topology(&args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Sim(SimError),
    #[error("cannot write `{path}`: {detail}")]
    Write { path: String, detail: String },
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Domain(d) => CliError::Domain(d),
            other => CliError::Sim(other),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Domain(DomainError::Io { .. }) => EXIT_IO,
            CliError::Domain(_) => EXIT_INVALID,
            CliError::Sim(SimError::Overlay(_)) => EXIT_INVALID,
            CliError::Sim(_) => EXIT_SIM,
            CliError::Write { .. } => EXIT_IO,
        }
    }
}

fn load(path: &Path) -> Result<Scenario, CliError> {
    Ok(Scenario::from_path(path)?)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let to_err = |e: std::io::Error, path: &Path| CliError::Write {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    std::fs::create_dir_all(dir).map_err(|e| to_err(e, dir))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| to_err(e, &path))
}

fn pretty_json<T: serde::Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    text
}

fn cmd_validate(args: &ValidateArgs) -> Result<(), CliError> {
    let scenario = load(&args.scenario)?;
    crate::domain::validate_scenario(&scenario)?;
    println!("ok: {}", args.scenario.display());
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let scenario = load(&args.scenario)?;
    let outputs = run_scenario(&scenario, args.seed)?;
    let wanted = |e: Emit| args.emit.as_ref().map_or(true, |v| v.contains(&e));
    if wanted(Emit::Events) {
        write_file(&args.out, "events.jsonl", &outputs.events_jsonl())?;
    }
    if wanted(Emit::Timeline) {
        write_file(&args.out, "timeline.csv", &outputs.timeline_csv())?;
    }
    if wanted(Emit::Summary) {
        write_file(&args.out, "summary.json", &pretty_json(&outputs.summary))?;
    }
    if wanted(Emit::Topology) {
        write_file(&args.out, "topology.json", &pretty_json(&outputs.topology))?;
    }
    print!("{}", pretty_json(&outputs.summary));
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<(), CliError> {
    let baseline = load(&args.scenario)?;
    let variant = load(&args.against)?;
    let report = compare_scenarios(&baseline, &variant, args.seed)?;
    let text = pretty_json(&report);
    if let Some(dir) = &args.out {
        write_file(dir, "compare.json", &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_plan_topology(args: &PlanTopologyArgs) -> Result<(), CliError> {
    let scenario = load(&args.scenario)?;
    let report = plan_initial_topology(&scenario)?;
    let text = pretty_json(&report);
    if let Some(dir) = &args.out {
        write_file(dir, "topology.json", &text)?;
    }
    print!("{text}");
    Ok(())
}
