//! Command-line front end: single solves, convergence sweeps, the torus
//! scenario and scheme-versus-Monte-Carlo comparisons.
//!
//! Exit codes: `0` success, `1` run failure, `2` configuration error. On
//! failure a JSON error record goes to stderr and, when the output directory
//! is writable, to `error.json`.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

pub use commands::{cmd_converge, cmd_mc_compare, cmd_plasma, cmd_solve};
pub use config::{ConfigError, RunConfig};
pub use report::{ConvergenceReport, ConvergenceRow};

use crate::mc_oracle::OracleError;
use crate::stepper::SolverError;

/// `git describe`-style version of this build.
pub const VERSION: &str = env!("JUMPKAC_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("solver failed: {0}")]
    Solver(#[from] SolverError),
    #[error("Monte Carlo estimator failed: {0}")]
    Oracle(#[from] OracleError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Solver(_) => "solver",
            CliError::Oracle(_) => "oracle",
            CliError::Io { .. } => "io",
            CliError::Csv(_) => "csv",
            CliError::Json(_) => "json",
        }
    }

    pub fn record(&self, command: &str) -> ErrorRecord {
        ErrorRecord {
            status: "error",
            command: command.to_string(),
            kind: self.kind(),
            message: self.to_string(),
            line: match self {
                CliError::Config(e) => e.line,
                _ => None,
            },
            exit_code: self.exit_code(),
            version: VERSION,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Machine-readable failure description.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub status: &'static str,
    pub command: String,
    pub kind: &'static str,
    pub message: String,
    pub line: Option<usize>,
    pub exit_code: i32,
    pub version: &'static str,
}

#[derive(Debug, Parser)]
#[command(name = "jumpkac", version = VERSION, about = "Probabilistic solver for nonlocal diffusion with volume constraints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one problem and write snapshots.
    Solve(CommonArgs),
    /// Run a dt sweep against the exact solution.
    Converge(CommonArgs),
    /// Torus heat-pulse runs over a list of kernel parameters.
    Plasma(CommonArgs),
    /// Compare the scheme with Monte Carlo estimates at probe points.
    McCompare(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::Converge(_) => "converge",
            Command::Plasma(_) => "plasma",
            Command::McCompare(_) => "mc-compare",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Solve(a) | Command::Converge(a) | Command::Plasma(a) | Command::McCompare(a) => a,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `output.dir` or `out/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, env = "JUMPKAC_THREADS")]
    pub threads: Option<usize>,
}

/// A parsed configuration together with its source.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub text: String,
    pub config: RunConfig,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let config = RunConfig::from_toml(&text)?;
        Ok(Self {
            path: path.to_path_buf(),
            text,
            config,
        })
    }
}

/// Run manifest written next to every artifact set.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest<T: Serialize> {
    pub command: String,
    pub version: &'static str,
    pub config_path: PathBuf,
    pub config: RunConfig,
    pub threads: Option<usize>,
    pub wall_time: f64,
    pub artifacts: Vec<String>,
    pub resolved: T,
}

impl<T: Serialize> Manifest<T> {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(io_err(&path))
    }
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn output_dir(command: &Command, loaded: Option<&LoadedConfig>) -> PathBuf {
    command
        .args()
        .out
        .clone()
        .or_else(|| loaded.and_then(|l| l.config.output.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out").join(command.name()))
}

fn dispatch(command: &Command, loaded: &LoadedConfig, out: &Path) -> Result<(), CliError> {
    let threads = command.args().threads;
    if threads == Some(0) {
        return Err(ConfigError::new("--threads must be at least 1").into());
    }
    match command {
        Command::Solve(_) => cmd_solve(loaded, out, threads),
        Command::Converge(_) => cmd_converge(loaded, out, threads).map(|_| ()),
        Command::Plasma(_) => cmd_plasma(loaded, out, threads).map(|_| ()),
        Command::McCompare(_) => cmd_mc_compare(loaded, out, threads).map(|_| ()),
    }
}

/// Run one parsed command and return its exit code.
pub fn run(cli: Cli) -> i32 {
    let command = cli.command;
    let loaded = LoadedConfig::load(&command.args().config);
    let out = output_dir(&command, loaded.as_ref().ok());
    let result = loaded.and_then(|loaded| dispatch(&command, &loaded, &out));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let record = e.record(command.name());
            let json = serde_json::to_string(&record).unwrap_or_else(|_| format!("{{\"message\":{:?}}}", e.to_string()));
            eprintln!("{json}");
            if fs::create_dir_all(&out).is_ok() {
                let _ = fs::write(out.join("error.json"), &json);
            }
            record.exit_code
        }
    }
}

/// Parse `args` (including the program name) and run.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}
