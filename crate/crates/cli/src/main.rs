//! `tuhr`: run the server, drive simulations, and inspect a data directory.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::{LogLevel, ServeArgs, StoreArgs};

/// Exit status when a verification finds a mismatch.
pub const EXIT_MISMATCH: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// Human-readable text.
    Plain,
    /// One JSON object per line.
    Records,
}

#[derive(Debug, Parser)]
#[command(name = "tuhr", version, about = "Smart waste bin monitoring and dispatch")]
struct Cli {
    /// TOML config file; flags and TUHR_* variables override it.
    #[arg(long, global = true, env = "TUHR_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "plain")]
    format: Format,
    #[arg(long, global = true, value_enum, env = "TUHR_LOG_LEVEL")]
    log_level: Option<LogLevel>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the telemetry listener, alert scanner and HTTP API.
    Serve(ServeArgs),
    /// Run a scenario against a server, or locally with --dry-run.
    Simulate(commands::SimulateArgs),
    /// Compute a dispatch plan from the recovered state.
    Plan(StoreArgs),
    /// Replay the event log and verify the result is deterministic.
    Replay(commands::ReplayArgs),
    /// Per-zone bin states, alerts and plan summary.
    Report(StoreArgs),
}

/// A check that ran and failed, as opposed to an error that stopped it.
#[derive(Debug)]
pub struct Mismatch(pub String);

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Mismatch {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file = match config::FileConfig::load(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => return fail(e),
    };
    env_logger::Builder::new()
        .filter_level(config::log_level(cli.log_level, &file).filter())
        .format_timestamp_millis()
        .target(env_logger::Target::Stderr)
        .init();
    let fmt = cli.format;
    let result = match cli.command {
        Command::Serve(args) => commands::serve(&args, &file),
        Command::Simulate(args) => commands::simulate(&args, fmt),
        Command::Plan(args) => commands::plan(&config::data_dir(&args, &file), fmt),
        Command::Replay(args) => commands::replay(&args, &file, fmt),
        Command::Report(args) => commands::report(&config::data_dir(&args, &file), fmt),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: anyhow::Error) -> ExitCode {
    let closed_pipe = e
        .downcast_ref::<std::io::Error>()
        .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe);
    if closed_pipe {
        return ExitCode::SUCCESS;
    }
    eprintln!("tuhr: error: {e:#}");
    if e.downcast_ref::<Mismatch>().is_some() {
        ExitCode::from(EXIT_MISMATCH)
    } else {
        ExitCode::FAILURE
    }
}
