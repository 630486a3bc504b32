//! Subcommand implementations.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use chrono::Utc;
use serde_json::json;

use tuhr_core::alerting::AlertKind;
use tuhr_core::dispatch::{plan_dispatch, DispatchPlan};
use tuhr_core::domain::BinState;
use tuhr_core::simulator::{load_scenario, ScenarioConfig, SimStats, Simulator};
use tuhr_core::store::{events_path, list_snapshots, read_snapshot, replay_until, SystemState};
use tuhr_core::store;
use tuhr_server::sim_client::{register_scenario, run_scenario, ClientOptions, RunReport};

use crate::config::{self, FileConfig, ServeArgs, StoreArgs};
use crate::{Format, Mismatch};

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("cannot start async runtime")
}

fn offset_text(o: Option<u64>) -> String {
    o.map_or_else(|| "none".into(), |o| o.to_string())
}

// ---- serve

async fn wait_for_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

pub fn serve(args: &ServeArgs, file: &FileConfig) -> Result<()> {
    let cfg = config::server_config(args, file)?;
    runtime()?.block_on(async move {
        let srv = tuhr_server::start(cfg).await.map_err(|e| anyhow!("{}: {e}", e.code()))?;
        println!(
            "tuhr listening telemetry={} api={} recovered_offset={} snapshot_hash={}",
            srv.telemetry_addr,
            srv.api_addr,
            offset_text(srv.startup.recovered_offset),
            srv.startup.snapshot_hash
        );
        std::io::stdout().flush()?;
        log::info!(
            "recovered {} events ({} replayed after snapshot {})",
            srv.startup.recovered_offset.map_or(0, |o| o + 1),
            srv.startup.replayed,
            offset_text(srv.startup.snapshot_offset)
        );
        wait_for_signal().await;
        log::info!("shutting down");
        match srv.shutdown().await {
            Ok(Some(path)) => log::info!("final snapshot {}", path.display()),
            Ok(None) => {}
            Err(e) => bail!("final snapshot failed: {e}"),
        }
        Ok(())
    })
}

// ---- simulate

#[derive(Debug, Clone, clap::Args)]
pub struct SimulateArgs {
    /// Built-in scenario name or path to a scenario file.
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Telemetry address of the server.
    #[arg(long, env = "TUHR_SERVER", default_value = "127.0.0.1:7070")]
    pub server: String,
    /// API base URL; when set, zones and sensors are registered first.
    #[arg(long, env = "TUHR_API")]
    pub api: Option<String>,
    #[arg(long, env = "TUHR_USERNAME", default_value = "admin")]
    pub username: String,
    #[arg(long, env = "TUHR_PASSWORD")]
    pub password: Option<String>,
    /// Parallel telemetry connections.
    #[arg(long, default_value_t = 4)]
    pub connections: usize,
    /// Real seconds per simulated second; 0 runs as fast as possible.
    #[arg(long)]
    pub time_scale: Option<f64>,
    #[arg(long)]
    pub duration_s: Option<f64>,
    #[arg(long)]
    pub dup_prob: Option<f64>,
    #[arg(long)]
    pub loss_prob: Option<f64>,
    #[arg(long)]
    pub reorder_prob: Option<f64>,
    /// Run the simulator without a server.
    #[arg(long)]
    pub dry_run: bool,
    /// With --dry-run, print every emitted wire record.
    #[arg(long, requires = "dry_run")]
    pub emit: bool,
}

fn scenario(args: &SimulateArgs) -> Result<ScenarioConfig> {
    let mut cfg = load_scenario(&args.scenario).map_err(|e| anyhow!("{}: {e}", e.code()))?;
    if let Some(s) = args.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(t) = args.time_scale {
        cfg.time_scale = t;
    }
    if let Some(d) = args.duration_s {
        cfg.duration_s = d;
    }
    if let Some(p) = args.dup_prob {
        cfg.faults.dup_prob = p;
    }
    if let Some(p) = args.loss_prob {
        cfg.faults.loss_prob = p;
    }
    if let Some(p) = args.reorder_prob {
        cfg.faults.reorder_prob = p;
    }
    cfg.validate().map_err(|e| anyhow!("{}: {e}", e.code()))?;
    Ok(cfg)
}

fn print_stats(cfg: &ScenarioConfig, stats: &SimStats, report: Option<&RunReport>, fmt: Format) {
    match fmt {
        Format::Records => {
            let mut v = json!({
                "record": "sim_stats",
                "scenario": cfg.name,
                "seed": cfg.seed,
                "stats": stats,
            });
            if let Some(r) = report {
                v["reconnects"] = json!(r.reconnects);
                v["wall_s"] = json!(r.wall_s);
                v["max_ack_latency_ms"] = json!(r.max_ack_latency_ms);
                v["p99_ack_latency_ms"] = json!(r.p99_ack_latency_ms);
            }
            println!("{v}");
        }
        Format::Plain => {
            println!("scenario {} seed {}", cfg.name, cfg.seed);
            println!("records_sent {}", stats.records_sent);
            println!("acks_ok {}", stats.acks_ok);
            println!("acks_dup {}", stats.acks_dup);
            println!("acks_err {}", stats.acks_err);
            println!("records_lost {}", stats.records_lost);
            for (bin, fill) in &stats.final_fill {
                println!("final_fill {bin} {fill:.6}");
            }
            if let Some(r) = report {
                println!("reconnects {}", r.reconnects);
                println!("wall_s {:.3}", r.wall_s);
                println!("max_ack_latency_ms {:.3}", r.max_ack_latency_ms);
                println!("p99_ack_latency_ms {:.3}", r.p99_ack_latency_ms);
            }
        }
    }
}

fn resolve(server: &str) -> Result<SocketAddr> {
    server
        .to_socket_addrs()
        .with_context(|| format!("bad server address {server}"))?
        .next()
        .ok_or_else(|| anyhow!("server address {server} resolves to nothing"))
}

pub fn simulate(args: &SimulateArgs, fmt: Format) -> Result<()> {
    let cfg = scenario(args)?;
    if args.dry_run {
        let mut sim = Simulator::new(cfg.clone());
        let emissions = sim.run_to_end();
        if args.emit {
            let mut out = std::io::stdout().lock();
            for em in &emissions {
                writeln!(out, "{}", em.envelope.to_line())?;
            }
        }
        print_stats(&cfg, sim.stats(), None, fmt);
        return Ok(());
    }
    let addr = resolve(&args.server)?;
    let opts = ClientOptions {
        connections: args.connections.max(1),
        ..ClientOptions::default()
    };
    let report = runtime()?.block_on(async {
        if let Some(api) = &args.api {
            let password = args
                .password
                .as_deref()
                .ok_or_else(|| anyhow!("--password (or TUHR_PASSWORD) is required with --api"))?;
            register_scenario(api, &args.username, password, &cfg)
                .await
                .map_err(|e| anyhow!("{}: {e}", e.code()))?;
        }
        run_scenario(cfg.clone(), addr, opts)
            .await
            .map_err(|e| anyhow!("{}: {e}", e.code()))
    })?;
    print_stats(&cfg, &report.stats, Some(&report), fmt);
    Ok(())
}

// ---- plan, replay, report

fn load_state(dir: &Path) -> Result<SystemState> {
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    store::replay(&events_path(dir)).map_err(|e| anyhow!("{}: {e}", e.code()))
}

fn print_plan(plan: &DispatchPlan, fmt: Format) {
    let stops: usize = plan.routes.iter().map(|r| r.stops.len()).sum();
    match fmt {
        Format::Records => {
            for r in &plan.routes {
                println!(
                    "{}",
                    json!({"record": "route", "plan_id": plan.plan_id, "worker_id": r.worker_id,
                           "stops": r.stops, "length_m": r.length_m})
                );
            }
            println!(
                "{}",
                json!({"record": "plan", "plan_id": plan.plan_id, "routes": plan.routes.len(),
                       "stops": stops, "length_m": plan.total_length_m(),
                       "unassigned": plan.unassigned, "error": plan.error})
            );
        }
        Format::Plain => {
            println!(
                "{} routes, {} stops, {:.1} m",
                plan.routes.len(),
                stops,
                plan.total_length_m()
            );
            for r in &plan.routes {
                println!(
                    "  {} {:.1} m: {}",
                    r.worker_id,
                    r.length_m,
                    r.stops.join(" -> ")
                );
            }
            if !plan.unassigned.is_empty() {
                println!("unassigned: {}", plan.unassigned.join(", "));
            }
            if let Some(e) = &plan.error {
                println!("note: {e}");
            }
        }
    }
}

pub fn plan(dir: &Path, fmt: Format) -> Result<()> {
    let state = load_state(dir)?;
    let bins: Vec<_> = state.bins.values().cloned().collect();
    let plan = plan_dispatch(&bins, &state.workers(), "offline", Utc::now());
    print_plan(&plan, fmt);
    Ok(())
}

#[derive(Debug, Clone, clap::Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// Stop after this offset.
    #[arg(long)]
    pub upto: Option<u64>,
}

pub fn replay(args: &ReplayArgs, file: &FileConfig, fmt: Format) -> Result<()> {
    let dir = config::data_dir(&args.store, file);
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    let path = events_path(&dir);
    let fold = || -> Result<SystemState> {
        match args.upto {
            Some(k) => replay_until(&path, k),
            None => store::replay(&path),
        }
        .map_err(|e| anyhow!("{}: {e}", e.code()))
    };
    let first = fold()?;
    let second = fold()?;
    let (h1, h2) = (first.hash(), second.hash());
    if h1 != h2 {
        return Err(Mismatch(format!("replays disagree: {h1} vs {h2}")).into());
    }
    // A snapshot within range must match the log at its own offset.
    let upto = first.as_of_offset;
    let mut checked = None;
    for (offset, snap) in list_snapshots(&dir).map_err(|e| anyhow!("{}: {e}", e.code()))? {
        if upto.is_none_or(|u| offset > u) {
            continue;
        }
        let Ok(snapshot) = read_snapshot(&snap) else {
            log::warn!("skipping unreadable snapshot {}", snap.display());
            continue;
        };
        let at = replay_until(&path, offset).map_err(|e| anyhow!("{}: {e}", e.code()))?;
        if at.hash() != snapshot.hash() {
            return Err(Mismatch(format!(
                "snapshot at offset {offset} has hash {} but the log gives {}",
                snapshot.hash(),
                at.hash()
            ))
            .into());
        }
        checked = Some(offset);
        break;
    }
    match fmt {
        Format::Records => println!(
            "{}",
            json!({"record": "replay", "offset": upto, "snapshot_hash": h1,
                   "snapshot_checked": checked})
        ),
        Format::Plain => {
            println!("offset {}", offset_text(upto));
            println!("snapshot_hash {h1}");
            println!("snapshot_checked {}", offset_text(checked));
        }
    }
    Ok(())
}

pub fn report(dir: &Path, fmt: Format) -> Result<()> {
    let state = load_state(dir)?;
    let mut zones: BTreeMap<&str, [usize; 4]> = state
        .zones
        .keys()
        .map(|z| (z.as_str(), [0; 4]))
        .collect();
    for b in state.bins.values() {
        zones.entry(b.config.zone_id.as_str()).or_default()[b.state as usize] += 1;
    }
    let mut total = [0usize; 4];
    for counts in zones.values() {
        for (t, c) in total.iter_mut().zip(counts) {
            *t += c;
        }
    }
    let kinds = [AlertKind::FullBin, AlertKind::Gas, AlertKind::SensorOffline];
    let active = |k: AlertKind| state.active_alerts().filter(|a| a.kind == k).count();
    let resolved = state.alerts.iter().filter(|a| !a.is_open()).count();

    match fmt {
        Format::Records => {
            for (zone, c) in zones.iter().map(|(z, c)| (*z, c)).chain([("ALL", &total)]) {
                let mut v = json!({"record": "zone", "zone_id": zone});
                for s in BinState::ALL {
                    v[s.as_str()] = json!(c[s as usize]);
                }
                println!("{v}");
            }
            let mut v = json!({"record": "alerts", "resolved": resolved});
            for k in kinds {
                v[k.as_str()] = json!(active(k));
            }
            println!("{v}");
            match &state.plan {
                Some(p) => println!(
                    "{}",
                    json!({"record": "plan", "plan_id": p.plan_id, "routes": p.routes.len(),
                           "stops": p.routes.iter().map(|r| r.stops.len()).sum::<usize>(),
                           "length_m": p.total_length_m(), "stale": p.stale})
                ),
                None => println!("{}", json!({"record": "plan", "plan_id": null})),
            }
        }
        Format::Plain => {
            print!("{:<12}", "ZONE");
            for s in BinState::ALL {
                print!(" {:>11}", s.as_str());
            }
            println!(" {:>6}", "TOTAL");
            for (zone, c) in zones.iter().map(|(z, c)| (*z, c)).chain([("ALL", &total)]) {
                print!("{zone:<12}");
                for n in c {
                    print!(" {n:>11}");
                }
                println!(" {:>6}", c.iter().sum::<usize>());
            }
            let parts: Vec<String> = kinds
                .iter()
                .map(|&k| format!("{}={}", k.as_str(), active(k)))
                .collect();
            println!("active alerts: {} (resolved {resolved})", parts.join(" "));
            match &state.plan {
                Some(p) => println!(
                    "plan {}: {} routes, {:.1} m{}",
                    p.plan_id,
                    p.routes.len(),
                    p.total_length_m(),
                    if p.stale { " (stale)" } else { "" }
                ),
                None => println!("plan: none"),
            }
        }
    }
    Ok(())
}
