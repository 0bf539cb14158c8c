//! `homx` command-line front end.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime or fit error,
//! 3 I/O or file-format error.

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use homx_core::config::RunConfig;
use homx_core::Error;

pub mod commands;
pub mod render;

/// Configuration used by `bench` when none is given.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/hom-beam.toml");

pub const CONFIG_ENV: &str = "HOMX_CONFIG";

#[derive(Debug, Parser)]
#[command(
    name = "homx",
    version,
    about = "Two-photon x-ray interference calculator and simulator"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,

    /// Overrides `simulation.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory for output artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub parallelism: usize,

    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Brightness, coherence and photon degeneracy of the configured beam.
    Calc,
    /// Simulate pulses into an event file and coincidence counters.
    Simulate {
        /// Overrides `simulation.n_pulses`.
        #[arg(long)]
        pulses: Option<u64>,
    },
    /// Displacement scan with dip and peak fits.
    Scan,
    /// Recompute counters from a stored event file.
    Analyze {
        file: PathBuf,
        /// Thresholds for amplitude-type files.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Counter matrix size for integer files without a calibration or
        /// configuration.
        #[arg(long)]
        max_resolvable: Option<u8>,
    },
    /// Throughput of the classify-only and full-simulation paths.
    Bench {
        /// Records classified per measurement.
        #[arg(long, default_value_t = 100_000_000)]
        records: u64,
        /// Pulses simulated per measurement.
        #[arg(long, default_value_t = 2_000_000)]
        pulses: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Validation = 1,
    Runtime = 2,
    Io = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn new(code: ExitCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } | Error::Unit { .. } | Error::Domain(_) => ExitCode::Validation,
            Error::Calibration(_) | Error::DimensionMismatch { .. } | Error::Fit { .. } => {
                ExitCode::Runtime
            }
            Error::Format { .. } | Error::Io(_) | Error::Json(_) => ExitCode::Io,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ExitCode::Io, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(ExitCode::Io, e.to_string())
    }
}

/// Loads the configuration named on the command line, applying `--seed`.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| {
        CliError::new(
            ExitCode::Validation,
            format!("no configuration: pass --config or set {CONFIG_ENV}"),
        )
    })?;
    let mut config = RunConfig::load(path).map_err(|e| match e {
        Error::Io(io) => CliError::new(ExitCode::Io, format!("{}: {io}", path.display())),
        other => other.into(),
    })?;
    if let Some(seed) = cli.seed {
        config.simulation.seed = seed;
    }
    Ok(config)
}

/// Runs the parsed command, writing the report to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn std::io::Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Calc => commands::calc(cli, stdout),
        Command::Simulate { pulses } => commands::simulate(cli, *pulses, stdout),
        Command::Scan => commands::scan(cli, stdout),
        Command::Analyze {
            file,
            calibration,
            max_resolvable,
        } => commands::analyze(cli, file, calibration.as_deref(), *max_resolvable, stdout),
        Command::Bench { records, pulses } => commands::bench(cli, *records, *pulses, stdout),
    }
}
