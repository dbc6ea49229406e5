//! Command-line front end for building and scoring occupancy maps.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{BuildArgs, CalibrateArgs, CompareArgs, EvalCmdArgs, SimulateArgs};
use config::FileConfig;

/// Failure with its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config file or schema (exit 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// Missing or malformed input data (exit 3).
    #[error("data error: {0}")]
    Data(String),
    /// Failure while running or writing outputs (exit 4).
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mrfmap", version, about = "Ray-MRF occupancy mapping from depth images")]
pub struct Cli {
    /// JSON config file; flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads [default: all cores].
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a map from a dataset and write map.mrfm and build.json.
    Build(BuildArgs),
    /// Score a map file, or run leave-one-out scoring on a dataset.
    Eval(EvalCmdArgs),
    /// Fit a per-patch noise model from (u, v, z_meas, z_gt) samples.
    Calibrate(CalibrateArgs),
    /// Render ground-truth and noisy depth images of a synthetic scene.
    Simulate(SimulateArgs),
    /// Leave-one-out accuracy for each resolution and method.
    Compare(CompareArgs),
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Build(a) => commands::cmd_build(a.layered(&file)).map(drop),
        Command::Eval(a) => commands::cmd_eval(a.layered(&file)).map(drop),
        Command::Calibrate(a) => {
            let a = CalibrateArgs { output: a.output.clone().or(file.output.clone()), ..a };
            commands::cmd_calibrate(a).map(drop)
        }
        Command::Simulate(a) => {
            let a = SimulateArgs { output: a.output.clone().or(file.output.clone()), seed: a.seed.or(file.seed), ..a };
            commands::cmd_simulate(a).map(drop)
        }
        Command::Compare(a) => commands::cmd_compare(a.layered(&file)).map(drop),
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mrfmap: {e}");
            e.exit_code()
        }
    }
}
