//! Drives a scenario against a live ingestion server over TCP.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, Notify, Semaphore};

use tuhr_core::domain::Zone;
use tuhr_core::simulator::{ScenarioConfig, SimStats, Simulator};
use tuhr_core::telemetry::{parse_ack, ReadingEnvelope};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot connect to {addr}: {source}")]
    ConnectionRefused {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("telemetry connection to {addr} failed after retries: {reason}")]
    Connection { addr: SocketAddr, reason: String },
    #[error("api request failed: {0}")]
    Api(String),
}

impl SimError {
    pub fn code(&self) -> &'static str {
        match self {
            SimError::ConnectionRefused { .. } => "CONNECTION_REFUSED",
            SimError::Connection { .. } => "CONNECTION_LOST",
            SimError::Api(_) => "API",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub connections: usize,
    /// Records awaiting an ack per connection before sending pauses.
    pub window: usize,
    pub reconnect_attempts: u32,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            connections: 4,
            window: 1024,
            reconnect_attempts: 20,
        }
    }
}

/// Stats plus client-side timing.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub stats: SimStats,
    pub reconnects: u64,
    pub wall_s: f64,
    /// Send-to-ack latency per acked record, in milliseconds.
    #[serde(skip)]
    pub latencies_ms: Vec<f64>,
    pub max_ack_latency_ms: f64,
    pub p99_ack_latency_ms: f64,
}

#[derive(Default)]
struct Tally {
    ok: u64,
    dup: u64,
    err: u64,
    reconnects: u64,
    latencies_ms: Vec<f64>,
}

struct InFlight {
    line: Vec<u8>,
    sent: Instant,
}

struct Link {
    inflight: Mutex<VecDeque<InFlight>>,
    window: Semaphore,
    drained: Notify,
    tally: Arc<Mutex<Tally>>,
}

async fn read_acks(
    read: tokio::net::tcp::OwnedReadHalf,
    link: Arc<Link>,
) -> std::io::Result<()> {
    let mut lines = BufReader::new(read).lines();
    while let Some(line) = lines.next_line().await? {
        let ack = parse_ack(line.as_bytes())
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let front = link.inflight.lock().unwrap().pop_front();
        let Some(rec) = front else {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "ack without a pending record",
            ));
        };
        {
            let mut t = link.tally.lock().unwrap();
            t.latencies_ms.push(rec.sent.elapsed().as_secs_f64() * 1e3);
            if ack.ok {
                t.ok += 1;
                t.dup += u64::from(ack.dup);
            } else {
                t.err += 1;
            }
        }
        link.window.add_permits(1);
        link.drained.notify_waiters();
    }
    Err(std::io::ErrorKind::UnexpectedEof.into())
}

async fn connect(addr: SocketAddr) -> std::io::Result<TcpStream> {
    let s = TcpStream::connect(addr).await?;
    s.set_nodelay(true)?;
    Ok(s)
}

/// One telemetry connection. Replays unacked records after a reconnect.
async fn run_link(
    addr: SocketAddr,
    mut first: Option<TcpStream>,
    mut rx: mpsc::Receiver<ReadingEnvelope>,
    link: Arc<Link>,
    opts: ClientOptions,
) -> Result<(), SimError> {
    let mut attempts = 0u32;
    let mut input_done = false;
    loop {
        let stream = match first.take() {
            Some(s) => s,
            None => {
                attempts += 1;
                if attempts > opts.reconnect_attempts {
                    return Err(SimError::Connection {
                        addr,
                        reason: "reconnect attempts exhausted".into(),
                    });
                }
                tokio::time::sleep(Duration::from_millis(50 * u64::from(attempts.min(10)))).await;
                match connect(addr).await {
                    Ok(s) => {
                        link.tally.lock().unwrap().reconnects += 1;
                        s
                    }
                    Err(_) => continue,
                }
            }
        };
        let (read, mut write) = stream.into_split();
        let mut reader = tokio::spawn(read_acks(read, link.clone()));

        let resend: Vec<Vec<u8>> = {
            let mut q = link.inflight.lock().unwrap();
            let now = Instant::now();
            q.iter_mut()
                .map(|r| {
                    r.sent = now;
                    r.line.clone()
                })
                .collect()
        };
        let mut broken = false;
        let mut reader_done = false;
        for line in resend {
            if write.write_all(&line).await.is_err() {
                broken = true;
                break;
            }
        }

        while !broken {
            if input_done {
                // Wait for outstanding acks, then close.
                let drained = link.drained.notified();
                if link.inflight.lock().unwrap().is_empty() {
                    let _ = write.shutdown().await;
                    if !reader_done {
                        reader.abort();
                    }
                    return Ok(());
                }
                tokio::select! {
                    _ = drained => continue,
                    _ = &mut reader => { broken = true; reader_done = true; continue; }
                }
            }
            let permit = tokio::select! {
                p = link.window.acquire() => p.expect("window never closed"),
                _ = &mut reader => { broken = true; reader_done = true; continue; }
            };
            let env = tokio::select! {
                env = rx.recv() => env,
                _ = &mut reader => { broken = true; reader_done = true; continue; }
            };
            let Some(env) = env else {
                input_done = true;
                continue;
            };
            permit.forget();
            let mut line = env.to_line().into_bytes();
            line.push(b'\n');
            link.inflight.lock().unwrap().push_back(InFlight {
                line: line.clone(),
                sent: Instant::now(),
            });
            if write.write_all(&line).await.is_err() {
                broken = true;
            }
        }
        if !reader_done {
            reader.abort();
            let _ = reader.await;
        }
        attempts = attempts.min(1);
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Run `cfg` to completion against the telemetry server at `addr`,
/// pacing emissions by `time_scale`.
pub async fn run_scenario(
    cfg: ScenarioConfig,
    addr: SocketAddr,
    opts: ClientOptions,
) -> Result<RunReport, SimError> {
    let k = opts.connections.max(1);
    let tally = Arc::new(Mutex::new(Tally::default()));
    let mut senders = Vec::with_capacity(k);
    let mut links = Vec::with_capacity(k);
    for _ in 0..k {
        let stream = connect(addr)
            .await
            .map_err(|source| SimError::ConnectionRefused { addr, source })?;
        let (tx, rx) = mpsc::channel(opts.window);
        let link = Arc::new(Link {
            inflight: Mutex::new(VecDeque::new()),
            window: Semaphore::new(opts.window.max(1)),
            drained: Notify::new(),
            tally: tally.clone(),
        });
        links.push(tokio::spawn(run_link(
            addr,
            Some(stream),
            rx,
            link,
            opts.clone(),
        )));
        senders.push(tx);
    }
    let route: HashMap<String, usize> = cfg
        .bins
        .iter()
        .enumerate()
        .map(|(i, b)| (b.config.sensor_id.clone(), i % k))
        .collect();

    let scale = cfg.time_scale;
    let step_ms = ((cfg.report_interval_s * 1000.0) as u64).clamp(1, 1000);
    let mut sim = Simulator::new(cfg);
    let start = Instant::now();
    let mut failed = None;
    'outer: while !sim.finished() {
        for em in sim.step(step_ms) {
            if scale > 0.0 {
                let due = start + Duration::from_secs_f64(em.at_ms as f64 / 1000.0 * scale);
                tokio::time::sleep_until(due.into()).await;
            }
            let conn = route[&em.envelope.sensor_id];
            if senders[conn].send(em.envelope).await.is_err() {
                failed = Some(conn);
                break 'outer;
            }
        }
    }
    drop(senders);
    let mut first_err = None;
    for (i, h) in links.into_iter().enumerate() {
        let r = h.await.unwrap_or_else(|e| {
            Err(SimError::Connection {
                addr,
                reason: e.to_string(),
            })
        });
        if let Err(e) = r {
            first_err.get_or_insert(e);
        } else if failed == Some(i) {
            first_err.get_or_insert(SimError::Connection {
                addr,
                reason: "connection task stopped".into(),
            });
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }

    let wall_s = start.elapsed().as_secs_f64();
    let mut t = std::mem::take(&mut *tally.lock().unwrap());
    let mut stats = sim.stats().clone();
    stats.acks_ok = t.ok;
    stats.acks_dup = t.dup;
    stats.acks_err = t.err;
    t.latencies_ms.sort_by(f64::total_cmp);
    Ok(RunReport {
        stats,
        reconnects: t.reconnects,
        wall_s,
        max_ack_latency_ms: t.latencies_ms.last().copied().unwrap_or(0.0),
        p99_ack_latency_ms: percentile(&t.latencies_ms, 99.0),
        latencies_ms: t.latencies_ms,
    })
}

/// Register the scenario's zones and sensors through the API. Entries that
/// already exist are left alone.
pub async fn register_scenario(
    api_base: &str,
    username: &str,
    password: &str,
    cfg: &ScenarioConfig,
) -> Result<(), SimError> {
    let http = reqwest::Client::new();
    let base = api_base.trim_end_matches('/');
    let err = |e: reqwest::Error| SimError::Api(e.to_string());
    let resp = http
        .post(format!("{base}/api/login"))
        .json(&json!({"username": username, "password": password}))
        .send()
        .await
        .map_err(err)?;
    if !resp.status().is_success() {
        return Err(SimError::Api(format!("login failed: {}", resp.status())));
    }
    let body: serde_json::Value = resp.json().await.map_err(err)?;
    let token = body["token"]
        .as_str()
        .ok_or_else(|| SimError::Api("login response without token".into()))?
        .to_owned();

    let post = |path: &'static str, body: serde_json::Value| {
        let req = http
            .post(format!("{base}/api/{path}"))
            .bearer_auth(&token)
            .json(&body);
        async move {
            let resp = req.send().await.map_err(err)?;
            let status = resp.status();
            if status.is_success() || status == reqwest::StatusCode::UNPROCESSABLE_ENTITY {
                Ok(())
            } else {
                let text = resp.text().await.unwrap_or_default();
                Err(SimError::Api(format!("POST /api/{path}: {status} {text}")))
            }
        }
    };
    for zone_id in cfg.zone_ids() {
        let zone = Zone {
            zone_id: zone_id.to_owned(),
            name: zone_id.to_owned(),
            description: String::new(),
        };
        post("zones", serde_json::to_value(zone).expect("zone serializes")).await?;
    }
    for b in &cfg.bins {
        post("sensors", serde_json::to_value(&b.config).expect("bin serializes")).await?;
    }
    Ok(())
}
