//! TUHR server: telemetry ingestion, event store writer, alert scanner and
//! the HTTP API, plus a network client for the simulator.

pub mod api;
pub mod auth;
pub mod engine;
pub mod ingest;
pub mod notify;
pub mod sim_client;
pub mod tasks;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use rand::RngCore;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use tuhr_core::domain::{Role, Thresholds, WorkerProfile};
use tuhr_core::geo::GeoPoint;
use tuhr_core::store::{ConfigChange, StoreError, UserRecord};

pub use engine::{Engine, EngineConfig, EngineError, StartupInfo};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub data_dir: PathBuf,
    pub telemetry_addr: SocketAddr,
    pub api_addr: SocketAddr,
    pub credentials_file: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
    pub thresholds: Option<Thresholds>,
    pub offline_timeout: Duration,
    /// Zero disables the scanner.
    pub offline_scan_every: Duration,
    /// Zero disables automatic plan recomputation.
    pub plan_every: Duration,
    pub session_idle: Duration,
    pub snapshot_every: u64,
}

impl ServerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            data_dir: data_dir.into(),
            telemetry_addr: ([127, 0, 0, 1], 7070).into(),
            api_addr: ([127, 0, 0, 1], 8080).into(),
            credentials_file: None,
            static_dir: None,
            thresholds: None,
            offline_timeout: tasks::DEFAULT_OFFLINE_TIMEOUT,
            offline_scan_every: Duration::from_secs(10),
            plan_every: Duration::from_secs(30),
            session_idle: auth::DEFAULT_IDLE,
            snapshot_every: 10_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {what} port {port} ({addr}): {source}")]
    Bind {
        what: &'static str,
        addr: SocketAddr,
        port: u16,
        source: std::io::Error,
    },
    #[error("cannot create data directory {0}: {1}")]
    DataDir(PathBuf, std::io::Error),
    #[error("recovery failed: {0}")]
    Store(#[from] StoreError),
    #[error(transparent)]
    Credentials(#[from] auth::CredentialsError),
    #[error("startup configuration failed: {0}")]
    Engine(#[from] EngineError),
}

impl ServerError {
    pub fn code(&self) -> &'static str {
        match self {
            ServerError::Bind { .. } => "BIND",
            ServerError::DataDir(..) => "IO",
            ServerError::Store(e) => e.code(),
            ServerError::Credentials(_) => "CREDENTIALS",
            ServerError::Engine(e) => e.code(),
        }
    }
}

const SHUTDOWN_GRACE: Duration = Duration::from_secs(5);

pub struct RunningServer {
    pub telemetry_addr: SocketAddr,
    pub api_addr: SocketAddr,
    pub startup: StartupInfo,
    engine: Engine,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningServer {
    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Stop accepting work, then flush a final snapshot.
    pub async fn shutdown(self) -> Result<Option<PathBuf>, EngineError> {
        let _ = self.shutdown.send(true);
        for mut t in self.tasks {
            if tokio::time::timeout(SHUTDOWN_GRACE, &mut t).await.is_err() {
                t.abort();
            }
        }
        self.engine.shutdown().await
    }
}

async fn bind(what: &'static str, addr: SocketAddr) -> Result<TcpListener, ServerError> {
    TcpListener::bind(addr).await.map_err(|source| ServerError::Bind {
        what,
        addr,
        port: addr.port(),
        source,
    })
}

fn random_password() -> String {
    let mut b = [0u8; 12];
    rand::rng().fill_bytes(&mut b);
    hex::encode(b)
}

/// Seed users from the credentials file (new usernames only), or create a
/// bootstrap admin when the store has no users at all.
async fn seed(engine: &Engine, cfg: &ServerConfig) -> Result<(), ServerError> {
    let seeded = match &cfg.credentials_file {
        Some(path) => {
            let path = path.clone();
            tokio::task::spawn_blocking(move || auth::load_credentials(&path))
                .await
                .expect("credentials loader")?
        }
        None => Vec::new(),
    };
    for user in seeded {
        let exists = engine.read().users.contains_key(&user.profile.worker_id);
        if !exists {
            engine.configure(ConfigChange::UserUpsert { user }).await?;
        }
    }
    if engine.read().users.is_empty() {
        let password = random_password();
        let pw = password.clone();
        let password_hash = tokio::task::spawn_blocking(move || auth::hash_password(&pw))
            .await
            .expect("hasher");
        let user = UserRecord {
            profile: WorkerProfile {
                worker_id: "admin".into(),
                name: "Administrator".into(),
                start_location: GeoPoint { lat: 0.0, lon: 0.0 },
                capacity: 1,
                role: Role::Admin,
            },
            password_hash,
        };
        engine.configure(ConfigChange::UserUpsert { user }).await?;
        log::warn!("no users configured; created user 'admin' with password '{password}'");
    }
    if let Some(t) = &cfg.thresholds {
        if engine.read().thresholds != *t {
            engine
                .configure(ConfigChange::ThresholdsSet { thresholds: t.clone() })
                .await?;
        }
    }
    Ok(())
}

/// Recover the store, bind both listeners and start every subsystem.
pub async fn start(cfg: ServerConfig) -> Result<RunningServer, ServerError> {
    std::fs::create_dir_all(&cfg.data_dir)
        .map_err(|e| ServerError::DataDir(cfg.data_dir.clone(), e))?;
    let telemetry = bind("telemetry", cfg.telemetry_addr).await?;
    let http = bind("api", cfg.api_addr).await?;
    let telemetry_addr = telemetry.local_addr().map_err(|source| ServerError::Bind {
        what: "telemetry",
        addr: cfg.telemetry_addr,
        port: cfg.telemetry_addr.port(),
        source,
    })?;
    let api_addr = http.local_addr().map_err(|source| ServerError::Bind {
        what: "api",
        addr: cfg.api_addr,
        port: cfg.api_addr.port(),
        source,
    })?;

    let mut ecfg = EngineConfig::new(&cfg.data_dir);
    ecfg.snapshot_every = cfg.snapshot_every;
    let (engine, startup) = Engine::start(ecfg)?;
    seed(&engine, &cfg).await?;

    let (shutdown, rx) = watch::channel(false);
    let mut tasks = Vec::new();
    tasks.push(tokio::spawn(ingest::serve(telemetry, engine.clone(), rx.clone())));

    let state = api::ApiState {
        engine: engine.clone(),
        sessions: Arc::new(auth::Sessions::new(cfg.session_idle)),
        shutdown: rx.clone(),
    };
    let app = api::router(state, cfg.static_dir.clone());
    let mut http_stop = rx.clone();
    tasks.push(tokio::spawn(async move {
        let stop = async move {
            let _ = http_stop.changed().await;
        };
        if let Err(e) = axum::serve(http, app).with_graceful_shutdown(stop).await {
            log::error!("api server failed: {e}");
        }
    }));
    if !cfg.offline_scan_every.is_zero() {
        tasks.push(tokio::spawn(tasks::offline_scanner(
            engine.clone(),
            cfg.offline_scan_every,
            cfg.offline_timeout,
            rx.clone(),
        )));
    }
    if !cfg.plan_every.is_zero() {
        tasks.push(tokio::spawn(tasks::planner(engine.clone(), cfg.plan_every, rx)));
    }
    Ok(RunningServer {
        telemetry_addr,
        api_addr,
        startup,
        engine,
        shutdown,
        tasks,
    })
}
