//! The single writer. Every mutation of the event log and of the shared
//! in-memory state happens on one thread, fed by a command channel.
//! Commands are processed in batches: everything a batch stages is made
//! durable by one fsync before any reply or notification goes out.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};
use std::thread;
use std::time::Instant;

use chrono::{DateTime, Duration, Utc};
use thiserror::Error;
use tokio::sync::{broadcast, mpsc, oneshot};

use tuhr_core::alerting::{offline_scan, AlertAction, AlertEvent, AlertKind};
use tuhr_core::dispatch::{plan_dispatch, DispatchPlan};
use tuhr_core::domain::{mark_emptied, BinRecord, BinState};
use tuhr_core::store::{
    alert_id, prune, recover, resolution_of, write_snapshot, Admission, BinEmptied, Change,
    ConfigChange, ConfigError, EventLog, EventPayload, EventRecord, ReadingAccepted, StoreError,
    SystemState, SNAPSHOTS_KEPT,
};
use tuhr_core::telemetry::{AckError, AckRecord, ReadingEnvelope};

use crate::notify::{notices_for, Notice};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("{0}")]
    NotFound(String),
    #[error("timestamp {ts} is older than the last reading {last}")]
    StaleTimestamp {
        ts: DateTime<Utc>,
        last: DateTime<Utc>,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Conflict(String),
    #[error("store write failed: {0}")]
    Io(String),
    #[error("engine stopped")]
    Closed,
}

impl EngineError {
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::NotFound(_) => "NOT_FOUND",
            EngineError::StaleTimestamp { .. } => "STALE_TIMESTAMP",
            EngineError::Invalid(_) => "INVALID",
            EngineError::Conflict(_) => "CONFLICT",
            EngineError::Io(_) => "IO_FAILURE",
            EngineError::Closed => "UNAVAILABLE",
        }
    }
}

impl From<ConfigError> for EngineError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::NotFound(m) => EngineError::NotFound(format!("{m} not found")),
            ConfigError::Conflict(m) => EngineError::Conflict(m),
            ConfigError::Invalid(m) => EngineError::Invalid(m),
            ConfigError::Duplicate(m) => EngineError::Invalid(format!("{m} already exists")),
        }
    }
}

type Reply<T> = oneshot::Sender<Result<T, EngineError>>;

enum Command {
    Reading(ReadingEnvelope, Reply<AckRecord>),
    Empty {
        bin_id: String,
        ts: DateTime<Utc>,
        by: Option<String>,
        reply: Reply<BinRecord>,
    },
    Config(ConfigChange, Reply<u64>),
    Plan(DateTime<Utc>, Reply<DispatchPlan>),
    OfflineScan(DateTime<Utc>, Duration, Reply<Vec<AlertEvent>>),
    Snapshot(Reply<Option<PathBuf>>),
    Shutdown(Reply<Option<PathBuf>>),
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub data_dir: PathBuf,
    /// Write a snapshot after this many events; 0 disables.
    pub snapshot_every: u64,
    pub queue_depth: usize,
    pub max_batch: usize,
}

impl EngineConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        EngineConfig {
            data_dir: data_dir.into(),
            snapshot_every: 10_000,
            queue_depth: 8192,
            max_batch: 1024,
        }
    }
}

/// Newest reading timestamp and when it was seen. Serves as the clock
/// for the offline scan so simulated time and wall time both work.
#[derive(Debug, Clone, Copy)]
struct Watermark {
    ts: DateTime<Utc>,
    seen: Instant,
}

struct Shared {
    state: RwLock<SystemState>,
    notices: broadcast::Sender<Notice>,
    watermark: Mutex<Option<Watermark>>,
    committed: Mutex<u64>,
    data_dir: PathBuf,
    events_path: PathBuf,
}

/// Cheap cloneable handle to the writer.
#[derive(Clone)]
pub struct Engine {
    tx: mpsc::Sender<Command>,
    shared: Arc<Shared>,
}

/// What recovery found at startup.
#[derive(Debug, Clone)]
pub struct StartupInfo {
    pub recovered_offset: Option<u64>,
    pub snapshot_offset: Option<u64>,
    pub replayed: u64,
    pub snapshot_hash: String,
}

impl Engine {
    /// Recover state from `cfg.data_dir` and start the writer thread.
    pub fn start(cfg: EngineConfig) -> Result<(Engine, StartupInfo), StoreError> {
        let rec = recover(&cfg.data_dir)?;
        let info = StartupInfo {
            recovered_offset: rec.state.as_of_offset,
            snapshot_offset: rec.snapshot_offset,
            replayed: rec.replayed,
            snapshot_hash: rec.state.hash(),
        };
        let watermark = rec
            .state
            .bins
            .values()
            .filter_map(|b| b.last_reading_ts)
            .max()
            .map(|ts| Watermark {
                ts,
                seen: Instant::now(),
            });
        let (notices, _) = broadcast::channel(4096);
        let shared = Arc::new(Shared {
            events_path: rec.log.path().to_owned(),
            committed: Mutex::new(rec.log.committed_count()),
            state: RwLock::new(rec.state),
            notices,
            watermark: Mutex::new(watermark),
            data_dir: cfg.data_dir.clone(),
        });
        let (tx, rx) = mpsc::channel(cfg.queue_depth);
        let writer = Writer {
            shared: shared.clone(),
            log: rec.log,
            since_snapshot: 0,
            cfg,
        };
        thread::Builder::new()
            .name("tuhr-writer".into())
            .spawn(move || writer.run(rx))
            .expect("spawn writer thread");
        Ok((Engine { tx, shared }, info))
    }

    /// Point-in-time read access to the state. Hold briefly.
    pub fn read(&self) -> RwLockReadGuard<'_, SystemState> {
        self.shared.state.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Notice> {
        self.shared.notices.subscribe()
    }

    pub fn events_path(&self) -> &Path {
        &self.shared.events_path
    }

    pub fn data_dir(&self) -> &Path {
        &self.shared.data_dir
    }

    /// Number of durable events.
    pub fn committed(&self) -> u64 {
        *self.shared.committed.lock().unwrap()
    }

    /// Event-time clock: newest reading time plus wall time since it
    /// arrived.
    pub fn event_clock(&self) -> Option<DateTime<Utc>> {
        let w = (*self.shared.watermark.lock().unwrap())?;
        let elapsed = Duration::from_std(w.seen.elapsed()).unwrap_or_default();
        Some(w.ts + elapsed)
    }

    async fn call<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, EngineError> {
        let (tx, rx) = oneshot::channel();
        self.tx
            .send(make(tx))
            .await
            .map_err(|_| EngineError::Closed)?;
        rx.await.map_err(|_| EngineError::Closed)?
    }

    /// Submit a parsed reading. The returned receiver resolves once the
    /// reading's batch is durable, so callers can pipeline.
    pub async fn submit_reading(
        &self,
        env: ReadingEnvelope,
    ) -> Result<oneshot::Receiver<Result<AckRecord, EngineError>>, EngineError> {
        let (tx, rx) = oneshot::channel();
        self.tx
            .send(Command::Reading(env, tx))
            .await
            .map_err(|_| EngineError::Closed)?;
        Ok(rx)
    }

    pub async fn reading(&self, env: ReadingEnvelope) -> Result<AckRecord, EngineError> {
        self.submit_reading(env)
            .await?
            .await
            .map_err(|_| EngineError::Closed)?
    }

    pub async fn empty_bin(
        &self,
        bin_id: &str,
        ts: DateTime<Utc>,
        by: Option<String>,
    ) -> Result<BinRecord, EngineError> {
        let bin_id = bin_id.to_owned();
        self.call(|reply| Command::Empty {
            bin_id,
            ts,
            by,
            reply,
        })
        .await
    }

    /// Append a configuration change. Returns its offset.
    pub async fn configure(&self, change: ConfigChange) -> Result<u64, EngineError> {
        self.call(|reply| Command::Config(change, reply)).await
    }

    pub async fn recompute_plan(&self, ts: DateTime<Utc>) -> Result<DispatchPlan, EngineError> {
        self.call(|reply| Command::Plan(ts, reply)).await
    }

    pub async fn offline_scan(
        &self,
        now: DateTime<Utc>,
        timeout: Duration,
    ) -> Result<Vec<AlertEvent>, EngineError> {
        self.call(|reply| Command::OfflineScan(now, timeout, reply))
            .await
    }

    pub async fn snapshot(&self) -> Result<Option<PathBuf>, EngineError> {
        self.call(Command::Snapshot).await
    }

    /// Write a final snapshot and stop the writer.
    pub async fn shutdown(&self) -> Result<Option<PathBuf>, EngineError> {
        self.call(Command::Shutdown).await
    }
}

enum Pending {
    Ack(Reply<AckRecord>, AckRecord),
    Bin(Reply<BinRecord>, BinRecord),
    Offset(Reply<u64>, u64),
    Plan(Reply<DispatchPlan>, DispatchPlan),
    Alerts(Reply<Vec<AlertEvent>>, Vec<AlertEvent>),
}

impl Pending {
    fn send(self) {
        match self {
            Pending::Ack(r, v) => drop(r.send(Ok(v))),
            Pending::Bin(r, v) => drop(r.send(Ok(v))),
            Pending::Offset(r, v) => drop(r.send(Ok(v))),
            Pending::Plan(r, v) => drop(r.send(Ok(v))),
            Pending::Alerts(r, v) => drop(r.send(Ok(v))),
        }
    }

    fn fail(self, e: EngineError) {
        match self {
            Pending::Ack(r, _) => drop(r.send(Err(e))),
            Pending::Bin(r, _) => drop(r.send(Err(e))),
            Pending::Offset(r, _) => drop(r.send(Err(e))),
            Pending::Plan(r, _) => drop(r.send(Err(e))),
            Pending::Alerts(r, _) => drop(r.send(Err(e))),
        }
    }
}

struct Writer {
    shared: Arc<Shared>,
    log: EventLog,
    since_snapshot: u64,
    cfg: EngineConfig,
}

/// Per-batch scratch space.
#[derive(Default)]
struct Batch {
    pending: Vec<Pending>,
    notices: Vec<Notice>,
    watermark: Option<DateTime<Utc>>,
}

impl Writer {
    fn run(mut self, mut rx: mpsc::Receiver<Command>) {
        let mut buf: Vec<Command> = Vec::with_capacity(self.cfg.max_batch);
        while let Some(first) = rx.blocking_recv() {
            buf.push(first);
            while buf.len() < self.cfg.max_batch {
                match rx.try_recv() {
                    Ok(c) => buf.push(c),
                    Err(_) => break,
                }
            }
            let mut batch = Batch::default();
            let mut stop: Option<Reply<Option<PathBuf>>> = None;
            let mut snapshot_requests = Vec::new();
            {
                let shared = self.shared.clone();
                let mut state = shared.state.write().unwrap_or_else(|e| e.into_inner());
                for cmd in buf.drain(..) {
                    match cmd {
                        Command::Snapshot(r) => snapshot_requests.push(r),
                        Command::Shutdown(r) => stop = Some(r),
                        other => self.handle(&mut state, other, &mut batch),
                    }
                }
            }
            self.commit(batch);
            let snapshot_due = self.cfg.snapshot_every > 0
                && self.since_snapshot >= self.cfg.snapshot_every;
            if snapshot_due || !snapshot_requests.is_empty() || stop.is_some() {
                let result = self.snapshot();
                for r in snapshot_requests {
                    let _ = r.send(result.clone());
                }
                if let Some(r) = stop {
                    let _ = r.send(result);
                    return;
                }
            }
        }
        let _ = self.snapshot();
    }

    fn snapshot(&mut self) -> Result<Option<PathBuf>, EngineError> {
        self.since_snapshot = 0;
        let state = self.shared.state.read().unwrap_or_else(|e| e.into_inner());
        let path = write_snapshot(&self.shared.data_dir, &state)
            .map_err(|e| EngineError::Io(e.to_string()))?;
        drop(state);
        if let Err(e) = prune(&self.shared.data_dir, SNAPSHOTS_KEPT) {
            log::warn!("snapshot pruning failed: {e}");
        }
        Ok(path)
    }

    fn commit(&mut self, batch: Batch) {
        let staged = self.log.next_offset() - self.log.committed_count();
        match self.log.commit() {
            Ok(()) => {
                self.since_snapshot += staged;
                *self.shared.committed.lock().unwrap() = self.log.committed_count();
                if let Some(ts) = batch.watermark {
                    let mut w = self.shared.watermark.lock().unwrap();
                    if w.is_none_or(|w| ts > w.ts) {
                        *w = Some(Watermark {
                            ts,
                            seen: Instant::now(),
                        });
                    }
                }
                for n in batch.notices {
                    let _ = self.shared.notices.send(n);
                }
                for p in batch.pending {
                    p.send();
                }
            }
            Err(e) => {
                log::error!("event log commit failed: {e}");
                let err = EngineError::Io(e.to_string());
                if let Err(e) = self.log.rollback() {
                    log::error!("rollback failed: {e}");
                }
                self.reload();
                for p in batch.pending {
                    p.fail(err.clone());
                }
            }
        }
    }

    /// Rebuild the in-memory state from disk after a failed commit.
    fn reload(&mut self) {
        match recover(&self.shared.data_dir) {
            Ok(rec) => {
                self.log = rec.log;
                *self.shared.state.write().unwrap_or_else(|e| e.into_inner()) = rec.state;
            }
            Err(e) => log::error!("reload after failed commit failed: {e}"),
        }
    }

    fn stage(
        &mut self,
        state: &mut SystemState,
        ts: DateTime<Utc>,
        payload: EventPayload,
        batch: &mut Batch,
    ) -> (EventRecord, Vec<Change>) {
        let ev = self.log.stage(ts, payload);
        let changes = state.apply(&ev);
        batch.notices.extend(notices_for(&ev, &changes, state));
        (ev, changes)
    }

    /// Stage the ALERT_RAISED / ALERT_RESOLVED records that confirm alert
    /// changes the fold derived from `changes`.
    fn confirm_alerts(
        &mut self,
        state: &mut SystemState,
        ts: DateTime<Utc>,
        changes: &[Change],
        batch: &mut Batch,
    ) {
        for c in changes {
            let payload = match c {
                Change::AlertRaised(a) => EventPayload::AlertRaised(a.clone()),
                Change::AlertResolved(a) => match resolution_of(a) {
                    Some(r) => EventPayload::AlertResolved(r),
                    None => continue,
                },
                _ => continue,
            };
            self.stage(state, ts, payload, batch);
        }
    }

    fn handle(&mut self, state: &mut SystemState, cmd: Command, batch: &mut Batch) {
        let now = Utc::now();
        match cmd {
            Command::Reading(env, reply) => {
                let bin_id = match state.admission(&env) {
                    Admission::UnknownSensor => {
                        let _ = reply.send(Ok(AckRecord::rejected(
                            AckError::UnknownSensor,
                            Some(env.seq),
                        )));
                        return;
                    }
                    Admission::Duplicate => {
                        // Still wait for the batch: the first copy may be
                        // staged in it.
                        batch
                            .pending
                            .push(Pending::Ack(reply, AckRecord::duplicate(env.seq)));
                        return;
                    }
                    Admission::Accept(bin) => bin.config.bin_id.clone(),
                };
                let seq = env.seq;
                let ts = env.ts;
                let (_, changes) = self.stage(
                    state,
                    now,
                    EventPayload::ReadingAccepted(ReadingAccepted {
                        bin_id,
                        reading: env,
                    }),
                    batch,
                );
                self.confirm_alerts(state, now, &changes, batch);
                if batch.watermark.is_none_or(|w| ts > w) {
                    batch.watermark = Some(ts);
                }
                batch.pending.push(Pending::Ack(reply, AckRecord::accepted(seq)));
            }
            Command::Empty {
                bin_id,
                ts,
                by,
                reply,
            } => {
                let Some(bin) = state.bins.get(&bin_id) else {
                    let _ = reply.send(Err(EngineError::NotFound(format!("bin {bin_id} not found"))));
                    return;
                };
                if let Err(e) = mark_emptied(bin, ts) {
                    let err = match e {
                        tuhr_core::domain::DomainError::StaleTimestamp { ts, last } => {
                            EngineError::StaleTimestamp { ts, last }
                        }
                        other => EngineError::Invalid(other.to_string()),
                    };
                    let _ = reply.send(Err(err));
                    return;
                }
                if bin.state == BinState::Empty && bin.fill == 0.0 {
                    let rec = bin.clone();
                    batch.pending.push(Pending::Bin(reply, rec));
                    return;
                }
                let (_, changes) = self.stage(
                    state,
                    ts,
                    EventPayload::BinEmptied(BinEmptied {
                        bin_id: bin_id.clone(),
                        by,
                    }),
                    batch,
                );
                self.confirm_alerts(state, ts, &changes, batch);
                let rec = state.bins[&bin_id].clone();
                batch.pending.push(Pending::Bin(reply, rec));
            }
            Command::Config(change, reply) => {
                if let Err(e) = state.validate_config(&change) {
                    let _ = reply.send(Err(e.into()));
                    return;
                }
                let (ev, changes) =
                    self.stage(state, now, EventPayload::ConfigChanged(change), batch);
                self.confirm_alerts(state, now, &changes, batch);
                batch.pending.push(Pending::Offset(reply, ev.offset));
            }
            Command::Plan(ts, reply) => {
                let bins: Vec<BinRecord> = state.bins.values().cloned().collect();
                let workers = state.workers();
                let plan_id = format!("plan-{}", self.log.next_offset());
                let plan = plan_dispatch(&bins, &workers, &plan_id, ts);
                self.stage(state, ts, EventPayload::PlanCreated(plan.clone()), batch);
                batch.pending.push(Pending::Plan(reply, plan));
            }
            Command::OfflineScan(at, timeout, reply) => {
                if timeout <= Duration::zero() {
                    let _ = reply.send(Err(EngineError::Invalid("timeout must be positive".into())));
                    return;
                }
                let actions = offline_scan(at, state.bins.values(), timeout, state.open_alerts());
                let mut raised = Vec::new();
                for action in actions {
                    if let AlertAction::Raise {
                        kind,
                        bin_id,
                        ts,
                        detail,
                    } = action
                    {
                        let alert = AlertEvent {
                            alert_id: alert_id(kind, self.log.next_offset()),
                            kind,
                            bin_id,
                            raised_ts: ts,
                            resolved_ts: None,
                            detail,
                        };
                        let (_, changes) =
                            self.stage(state, now, EventPayload::AlertRaised(alert), batch);
                        raised.extend(changes.into_iter().filter_map(|c| match c {
                            Change::AlertRaised(a) if a.kind == AlertKind::SensorOffline => Some(a),
                            _ => None,
                        }));
                    }
                }
                batch.pending.push(Pending::Alerts(reply, raised));
            }
            Command::Snapshot(_) | Command::Shutdown(_) => unreachable!("handled by run"),
        }
    }
}
