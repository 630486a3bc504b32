//! Settings merged from flags, `TUHR_*` environment variables, an optional
//! TOML file and built-in defaults, in that order of precedence.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use tuhr_core::domain::Thresholds;
use tuhr_server::ServerConfig;

pub const DEFAULT_DATA_DIR: &str = "tuhr-data";
pub const DEFAULT_TELEMETRY_PORT: u16 = 7070;
pub const DEFAULT_API_PORT: u16 = 8080;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    pub fn filter(self) -> log::LevelFilter {
        match self {
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

/// Contents of the config file. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub bind: Option<IpAddr>,
    pub telemetry_port: Option<u16>,
    pub api_port: Option<u16>,
    pub credentials_file: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
    pub log_level: Option<LogLevel>,
    pub offline_timeout_s: Option<u64>,
    pub offline_scan_s: Option<u64>,
    pub plan_interval_s: Option<u64>,
    pub snapshot_every: Option<u64>,
    pub thresholds: Option<Thresholds>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("bad config file {}", path.display()))
    }
}

/// Flags shared by every command that touches a data directory.
#[derive(Debug, Clone, clap::Args)]
pub struct StoreArgs {
    /// Directory holding the event log and snapshots.
    #[arg(long, env = "TUHR_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// Address both listeners bind to.
    #[arg(long, env = "TUHR_BIND")]
    pub bind: Option<IpAddr>,
    /// 0 picks a free port.
    #[arg(long, env = "TUHR_TELEMETRY_PORT")]
    pub telemetry_port: Option<u16>,
    /// 0 picks a free port.
    #[arg(long, env = "TUHR_API_PORT")]
    pub api_port: Option<u16>,
    /// TOML file with [[users]] entries seeded at startup.
    #[arg(long, env = "TUHR_CREDENTIALS_FILE")]
    pub credentials_file: Option<PathBuf>,
    /// Serve dashboard files from this directory.
    #[arg(long, env = "TUHR_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
    #[arg(long, env = "TUHR_OFFLINE_TIMEOUT_S")]
    pub offline_timeout_s: Option<u64>,
    /// Seconds between offline scans; 0 disables.
    #[arg(long, env = "TUHR_OFFLINE_SCAN_S")]
    pub offline_scan_s: Option<u64>,
    /// Seconds between automatic plan checks; 0 disables.
    #[arg(long, env = "TUHR_PLAN_INTERVAL_S")]
    pub plan_interval_s: Option<u64>,
    /// Events between snapshots; 0 disables periodic snapshots.
    #[arg(long, env = "TUHR_SNAPSHOT_EVERY")]
    pub snapshot_every: Option<u64>,
}

pub fn data_dir(args: &StoreArgs, file: &FileConfig) -> PathBuf {
    args.data_dir
        .clone()
        .or_else(|| file.data_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

pub fn log_level(flag: Option<LogLevel>, file: &FileConfig) -> LogLevel {
    flag.or(file.log_level).unwrap_or(LogLevel::Info)
}

pub fn server_config(args: &ServeArgs, file: &FileConfig) -> Result<ServerConfig> {
    let mut cfg = ServerConfig::new(data_dir(&args.store, file));
    let bind = args
        .bind
        .or(file.bind)
        .unwrap_or(IpAddr::V4(Ipv4Addr::LOCALHOST));
    let telemetry_port = args
        .telemetry_port
        .or(file.telemetry_port)
        .unwrap_or(DEFAULT_TELEMETRY_PORT);
    let api_port = args.api_port.or(file.api_port).unwrap_or(DEFAULT_API_PORT);
    if telemetry_port != 0 && telemetry_port == api_port {
        bail!("telemetry and api ports must differ (both {telemetry_port})");
    }
    cfg.telemetry_addr = SocketAddr::new(bind, telemetry_port);
    cfg.api_addr = SocketAddr::new(bind, api_port);
    cfg.credentials_file = args
        .credentials_file
        .clone()
        .or_else(|| file.credentials_file.clone());
    cfg.static_dir = args.static_dir.clone().or_else(|| file.static_dir.clone());
    cfg.thresholds = file.thresholds;
    if let Some(t) = &cfg.thresholds {
        t.validate().context("bad [thresholds] in config file")?;
    }
    let secs = |flag: Option<u64>, file: Option<u64>| flag.or(file).map(Duration::from_secs);
    if let Some(d) = secs(args.offline_timeout_s, file.offline_timeout_s) {
        if d.is_zero() {
            bail!("offline timeout must be positive");
        }
        cfg.offline_timeout = d;
    }
    if let Some(d) = secs(args.offline_scan_s, file.offline_scan_s) {
        cfg.offline_scan_every = d;
    }
    if let Some(d) = secs(args.plan_interval_s, file.plan_interval_s) {
        cfg.plan_every = d;
    }
    if let Some(n) = args.snapshot_every.or(file.snapshot_every) {
        cfg.snapshot_every = n;
    }
    Ok(cfg)
}
