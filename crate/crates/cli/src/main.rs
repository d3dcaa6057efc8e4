//! `abreu`: command-line front end for the Abreu and Rochet–Choné solvers.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 solver
//! failure or failed check.

mod commands;
mod config;
mod registry;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

use config::{resolve, AbreuConfig, DualityConfig, OracleConfig, RcConfig, SweepConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Solver(String),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Solver(m) => write!(f, "solver failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "abreu", version, about = "Singular Abreu and Rochet-Choné solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the second boundary value problem of the Abreu system.
    SolveAbreu(SolveAbreuArgs),
    /// Solve the penalised Rochet-Choné approximation at one eps.
    SolveRc(SolveRcArgs),
    /// Run the penalised problem over decreasing eps against the oracle.
    Sweep(SweepArgs),
    /// Verify Legendre duality identities on a solve-abreu run directory.
    CheckDuality(CheckDualityArgs),
    /// Projected-gradient minimiser of the constrained problem.
    OracleMin(OracleArgs),
}

/// Flags shared by every command. Unset flags fall back to `--config`, then
/// to built-in defaults.
#[derive(Args, Serialize)]
struct Common {
    /// JSON file with configuration keys.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    jobs: Option<usize>,
    /// Recorded with the configuration; no command draws random numbers.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct Shape {
    /// disk[:r=..,cx=..,cy=..] | square[:a=..,cx=..,cy=..] | superellipse[:p=..] | classic
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
    /// Inner region, same syntax as --domain.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    inner: Option<String>,
    /// Grid points along the longer side.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    q: Option<f64>,
    /// Boundary data for u (zero, const:c, linear:a,b,c, quad, bowl:cx,cy, exp).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    phi: Option<String>,
    /// Boundary data for w, same registry as --phi (plus wexp).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    psi: Option<String>,
}

#[derive(Args, Serialize)]
struct SolveAbreuArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    shape: Shape,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<f64>,
    /// quadsrc | mms | quadratic:c | any --phi built-in
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    f0z: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_outer: Option<usize>,
    /// Convergence tolerance.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
    /// auto | none | quad | exp
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    exact: Option<String>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct RcArgs {
    /// const:c | zero | linear:a,b,c
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<String>,
    /// zero | linear | quadratic:c | tracking
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    f0: Option<String>,
}

#[derive(Args, Serialize)]
struct SolveRcArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    shape: Shape,
    #[command(flatten)]
    #[serde(flatten)]
    rc: RcArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    /// Convergence tolerance.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_iter: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    shape: Shape,
    #[command(flatten)]
    #[serde(flatten)]
    rc: RcArgs,
    /// Comma-separated, strictly decreasing.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    eps_list: Option<Vec<f64>>,
    /// Convergence tolerance.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_iter: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_iters: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct OracleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    #[command(flatten)]
    #[serde(flatten)]
    shape: Shape,
    #[command(flatten)]
    #[serde(flatten)]
    rc: RcArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    iters: Option<usize>,
    /// Projection sweeps per step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sweeps: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct CheckDualityArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Directory written by solve-abreu.
    #[arg(long)]
    #[serde(skip)]
    run: PathBuf,
    /// Where duality_report.json goes; defaults to the run directory.
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_involution: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_reciprocal: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_lt: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_plt: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    core_frac: Option<f64>,
}

fn flags(args: &impl Serialize) -> Map<String, Value> {
    match serde_json::to_value(args).expect("flags serialise") {
        Value::Object(m) => m,
        _ => unreachable!(),
    }
}

fn init_logging() {
    let level = match std::env::var("ABREU_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok("info") | Err(_) => log::LevelFilter::Info,
        Ok(other) => {
            eprintln!("ABREU_LOG={other} not recognised (quiet, info, debug); using info");
            log::LevelFilter::Info
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
}

fn set_jobs(jobs: Option<usize>) -> Result<(), CliError> {
    match jobs {
        Some(0) => Err(CliError::Config("jobs must be at least 1".into())),
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string())),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::SolveAbreu(a) => {
            let cfg: AbreuConfig = resolve(a.common.config.as_deref(), flags(&a))?;
            set_jobs(cfg.jobs)?;
            commands::solve_abreu(&cfg, &a.out)
        }
        Command::SolveRc(a) => {
            let cfg: RcConfig = resolve(a.common.config.as_deref(), flags(&a))?;
            set_jobs(cfg.jobs)?;
            commands::solve_rc(&cfg, &a.out)
        }
        Command::Sweep(a) => {
            let cfg: SweepConfig = resolve(a.common.config.as_deref(), flags(&a))?;
            set_jobs(cfg.jobs)?;
            commands::sweep(&cfg, &a.out)
        }
        Command::OracleMin(a) => {
            let cfg: OracleConfig = resolve(a.common.config.as_deref(), flags(&a))?;
            set_jobs(cfg.jobs)?;
            commands::oracle_min(&cfg, &a.out)
        }
        Command::CheckDuality(a) => {
            let cfg: DualityConfig = resolve(a.common.config.as_deref(), flags(&a))?;
            set_jobs(cfg.jobs)?;
            let out = a.out.clone().unwrap_or_else(|| a.run.clone());
            commands::check_duality(&cfg, &a.run, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
