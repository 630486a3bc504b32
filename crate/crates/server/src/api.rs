//! HTTP API under `/api`.

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{broadcast, mpsc, watch};
use tokio_stream::wrappers::ReceiverStream;
use tower_http::services::ServeDir;

use tuhr_core::domain::{BinConfig, Role, WorkerProfile, Zone};
use tuhr_core::geo::GeoPoint;
use tuhr_core::store::{ConfigChange, UserRecord};

use crate::auth::{dummy_verify, hash_password, verify_password, Principal, Sessions};
use crate::engine::{Engine, EngineError};
use crate::notify::{bin_view, notices_from_log, Notice};

pub const READS_DEFAULT_LIMIT: usize = 100;
pub const READS_MAX_LIMIT: usize = 1000;

#[derive(Clone)]
pub struct ApiState {
    pub engine: Engine,
    pub sessions: Arc<Sessions>,
    /// Flips to true when the server stops; open event streams end.
    pub shutdown: watch::Receiver<bool>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "UNAUTHORIZED", "missing, invalid or expired token")
    }

    fn forbidden() -> Self {
        Self::new(StatusCode::FORBIDDEN, "FORBIDDEN", "insufficient role")
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NOT_FOUND", what)
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "INVALID", msg)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match e {
            EngineError::NotFound(_) => StatusCode::NOT_FOUND,
            EngineError::StaleTimestamp { .. } | EngineError::Conflict(_) => StatusCode::CONFLICT,
            EngineError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            EngineError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            EngineError::Closed => StatusCode::SERVICE_UNAVAILABLE,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"error": self.code, "message": self.message})),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(e.to_string()))
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn principal_for(st: &ApiState, token: Option<&str>) -> ApiResult<Principal> {
    let username = token
        .and_then(|t| st.sessions.touch(t))
        .ok_or_else(ApiError::unauthorized)?;
    let state = st.engine.read();
    let user = state.users.get(&username).ok_or_else(ApiError::unauthorized)?;
    Ok(Principal {
        username,
        role: user.profile.role,
    })
}

fn authed(st: &ApiState, headers: &HeaderMap) -> ApiResult<Principal> {
    principal_for(st, bearer(headers))
}

fn admin(st: &ApiState, headers: &HeaderMap) -> ApiResult<Principal> {
    let p = authed(st, headers)?;
    if p.role != Role::Admin {
        return Err(ApiError::forbidden());
    }
    Ok(p)
}

pub fn router(st: ApiState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/login", post(login))
        .route("/bins", get(list_bins))
        .route("/bins/{id}", get(get_bin))
        .route("/bins/{id}/empty", post(empty_bin))
        .route("/reads", get(list_reads))
        .route("/alerts", get(list_alerts))
        .route("/plan", get(get_plan))
        .route("/plan/recompute", post(recompute_plan))
        .route("/zones", get(list_zones).post(create_zone))
        .route("/zones/{id}", get(get_zone).put(update_zone).delete(delete_zone))
        .route("/sensors", get(list_sensors).post(create_sensor))
        .route(
            "/sensors/{id}",
            get(get_sensor).put(update_sensor).delete(delete_sensor),
        )
        .route("/users", get(list_users).post(create_user))
        .route("/users/{id}", get(get_user).put(update_user).delete(delete_user))
        .route("/me", get(get_me).put(update_me))
        .route("/status", get(status))
        .route("/events", get(events))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(st);
    let app = Router::new().nest("/api", api);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

// ---- auth

#[derive(Deserialize)]
struct LoginBody {
    username: String,
    password: String,
}

async fn login(State(st): State<ApiState>, body: Bytes) -> ApiResult<Json<Value>> {
    let body: LoginBody = parse_body(&body)?;
    let stored = st
        .engine
        .read()
        .users
        .get(&body.username)
        .map(|u| (u.password_hash.clone(), u.profile.role));
    let password = body.password;
    let ok = tokio::task::spawn_blocking(move || match &stored {
        Some((hash, role)) => verify_password(&password, hash).then_some(*role),
        None => {
            dummy_verify(&password);
            None
        }
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))?;
    let Some(role) = ok else {
        return Err(ApiError::new(
            StatusCode::UNAUTHORIZED,
            "UNAUTHORIZED",
            "invalid username or password",
        ));
    };
    let token = st.sessions.issue(&body.username);
    Ok(Json(json!({
        "token": token,
        "username": body.username,
        "role": role,
        "idle_timeout_s": st.sessions.idle().as_secs(),
    })))
}

// ---- bins

async fn list_bins(State(st): State<ApiState>, headers: HeaderMap) -> ApiResult<Json<Vec<Value>>> {
    authed(&st, &headers)?;
    let state = st.engine.read();
    Ok(Json(state.bins.values().map(bin_view).collect()))
}

async fn get_bin(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    authed(&st, &headers)?;
    let state = st.engine.read();
    let bin = state
        .bins
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("bin {id} not found")))?;
    Ok(Json(bin_view(bin)))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EmptyBody {
    #[serde(default)]
    ts: Option<DateTime<Utc>>,
}

async fn empty_bin(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let p = authed(&st, &headers)?;
    let body: EmptyBody = if body.iter().all(u8::is_ascii_whitespace) {
        EmptyBody::default()
    } else {
        parse_body(&body)?
    };
    let ts = body.ts.unwrap_or_else(Utc::now);
    let rec = st.engine.empty_bin(&id, ts, Some(p.username)).await?;
    Ok(Json(bin_view(&rec)))
}

// ---- reads

#[derive(Deserialize)]
struct ReadsQuery {
    sensor: Option<String>,
    bin: Option<String>,
    since: Option<DateTime<Utc>>,
    limit: Option<usize>,
}

#[derive(Serialize)]
struct ReadView<'a> {
    offset: u64,
    bin_id: &'a str,
    sensor_id: &'a str,
    seq: u64,
    ts: DateTime<Utc>,
    distance_cm: f64,
    gas_ppm: f64,
    battery_pct: f64,
}

async fn list_reads(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Query(q): Query<ReadsQuery>,
) -> ApiResult<Json<Value>> {
    authed(&st, &headers)?;
    let limit = q.limit.unwrap_or(READS_DEFAULT_LIMIT);
    if limit == 0 || limit > READS_MAX_LIMIT {
        return Err(ApiError::invalid(format!(
            "limit must be between 1 and {READS_MAX_LIMIT}"
        )));
    }
    let state = st.engine.read();
    let mut rows: Vec<ReadView> = state
        .reads
        .iter()
        .filter(|(sid, _)| q.sensor.as_ref().is_none_or(|s| s == *sid))
        .flat_map(|(_, entries)| entries.iter())
        .filter(|e| q.bin.as_ref().is_none_or(|b| *b == e.bin_id))
        .filter(|e| q.since.is_none_or(|s| e.reading.ts >= s))
        .map(|e| ReadView {
            offset: e.offset,
            bin_id: &e.bin_id,
            sensor_id: &e.reading.sensor_id,
            seq: e.reading.seq,
            ts: e.reading.ts,
            distance_cm: e.reading.distance_cm,
            gas_ppm: e.reading.gas_ppm,
            battery_pct: e.reading.battery_pct,
        })
        .collect();
    rows.sort_unstable_by(|a, b| b.offset.cmp(&a.offset));
    rows.truncate(limit);
    Ok(Json(serde_json::to_value(rows).expect("reads serialize")))
}

// ---- alerts and plan

#[derive(Deserialize)]
struct AlertsQuery {
    active: Option<bool>,
}

async fn list_alerts(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Query(q): Query<AlertsQuery>,
) -> ApiResult<Json<Value>> {
    authed(&st, &headers)?;
    let state = st.engine.read();
    let alerts: Vec<_> = state
        .alerts
        .iter()
        .filter(|a| q.active.is_none_or(|want| a.is_open() == want))
        .collect();
    Ok(Json(serde_json::to_value(alerts).expect("alerts serialize")))
}

async fn get_plan(State(st): State<ApiState>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    authed(&st, &headers)?;
    let state = st.engine.read();
    let plan = state
        .plan
        .as_ref()
        .ok_or_else(|| ApiError::not_found("no plan has been computed"))?;
    Ok(Json(serde_json::to_value(plan).expect("plan serializes")))
}

async fn recompute_plan(State(st): State<ApiState>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    admin(&st, &headers)?;
    let plan = st.engine.recompute_plan(Utc::now()).await?;
    Ok(Json(serde_json::to_value(plan).expect("plan serializes")))
}

// ---- zones

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ZoneBody {
    #[serde(default)]
    zone_id: Option<String>,
    name: String,
    #[serde(default)]
    description: String,
}

async fn list_zones(State(st): State<ApiState>, headers: HeaderMap) -> ApiResult<Json<Vec<Zone>>> {
    admin(&st, &headers)?;
    Ok(Json(st.engine.read().zones.values().cloned().collect()))
}

async fn get_zone(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<Zone>> {
    admin(&st, &headers)?;
    let z = st.engine.read().zones.get(&id).cloned();
    z.map(Json)
        .ok_or_else(|| ApiError::not_found(format!("zone {id} not found")))
}

async fn create_zone(
    State(st): State<ApiState>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Zone>)> {
    admin(&st, &headers)?;
    let b: ZoneBody = parse_body(&body)?;
    let zone = Zone {
        zone_id: b.zone_id.ok_or_else(|| ApiError::invalid("zone_id is required"))?,
        name: b.name,
        description: b.description,
    };
    if st.engine.read().zones.contains_key(&zone.zone_id) {
        return Err(ApiError::invalid(format!("zone {} already exists", zone.zone_id)));
    }
    st.engine
        .configure(ConfigChange::ZoneUpsert { zone: zone.clone() })
        .await?;
    Ok((StatusCode::CREATED, Json(zone)))
}

async fn update_zone(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Zone>> {
    admin(&st, &headers)?;
    let b: ZoneBody = parse_body(&body)?;
    if b.zone_id.as_ref().is_some_and(|z| *z != id) {
        return Err(ApiError::invalid("zone_id cannot change"));
    }
    if !st.engine.read().zones.contains_key(&id) {
        return Err(ApiError::not_found(format!("zone {id} not found")));
    }
    let zone = Zone {
        zone_id: id,
        name: b.name,
        description: b.description,
    };
    st.engine
        .configure(ConfigChange::ZoneUpsert { zone: zone.clone() })
        .await?;
    Ok(Json(zone))
}

async fn delete_zone(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<StatusCode> {
    admin(&st, &headers)?;
    st.engine
        .configure(ConfigChange::ZoneDelete { zone_id: id })
        .await?;
    Ok(StatusCode::NO_CONTENT)
}

// ---- sensors (each registers a bin)

async fn list_sensors(
    State(st): State<ApiState>,
    headers: HeaderMap,
) -> ApiResult<Json<Vec<BinConfig>>> {
    admin(&st, &headers)?;
    let state = st.engine.read();
    let mut out: Vec<BinConfig> = state.bins.values().map(|b| b.config.clone()).collect();
    out.sort_by(|a, b| a.sensor_id.cmp(&b.sensor_id));
    Ok(Json(out))
}

fn sensor_config(st: &ApiState, sensor_id: &str) -> ApiResult<BinConfig> {
    st.engine
        .read()
        .bin_for_sensor(sensor_id)
        .map(|b| b.config.clone())
        .ok_or_else(|| ApiError::not_found(format!("sensor {sensor_id} not found")))
}

async fn get_sensor(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<BinConfig>> {
    admin(&st, &headers)?;
    sensor_config(&st, &id).map(Json)
}

async fn create_sensor(
    State(st): State<ApiState>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<BinConfig>)> {
    admin(&st, &headers)?;
    let bin: BinConfig = parse_body(&body)?;
    {
        let state = st.engine.read();
        if state.sensors.contains_key(&bin.sensor_id) {
            return Err(ApiError::invalid(format!("sensor {} already exists", bin.sensor_id)));
        }
        if state.bins.contains_key(&bin.bin_id) {
            return Err(ApiError::invalid(format!("bin {} already exists", bin.bin_id)));
        }
    }
    st.engine
        .configure(ConfigChange::BinUpsert { bin: bin.clone() })
        .await?;
    Ok((StatusCode::CREATED, Json(bin)))
}

async fn update_sensor(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<BinConfig>> {
    admin(&st, &headers)?;
    let bin: BinConfig = parse_body(&body)?;
    let current = sensor_config(&st, &id)?;
    if bin.sensor_id != id {
        return Err(ApiError::invalid("sensor_id cannot change"));
    }
    if bin.bin_id != current.bin_id {
        return Err(ApiError::invalid("bin_id cannot change"));
    }
    st.engine
        .configure(ConfigChange::BinUpsert { bin: bin.clone() })
        .await?;
    Ok(Json(bin))
}

async fn delete_sensor(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<StatusCode> {
    admin(&st, &headers)?;
    let bin_id = sensor_config(&st, &id)?.bin_id;
    st.engine
        .configure(ConfigChange::BinDelete { bin_id })
        .await?;
    Ok(StatusCode::NO_CONTENT)
}

// ---- users

#[derive(Serialize)]
struct UserView {
    username: String,
    name: String,
    role: Role,
    start_location: GeoPoint,
    capacity: u32,
}

impl From<&UserRecord> for UserView {
    fn from(u: &UserRecord) -> Self {
        UserView {
            username: u.profile.worker_id.clone(),
            name: u.profile.name.clone(),
            role: u.profile.role,
            start_location: u.profile.start_location,
            capacity: u.profile.capacity,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewUser {
    username: String,
    password: String,
    role: Role,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    start_location: Option<GeoPoint>,
    #[serde(default)]
    capacity: Option<u32>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct UserPatch {
    #[serde(default)]
    password: Option<String>,
    #[serde(default)]
    role: Option<Role>,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    start_location: Option<GeoPoint>,
    #[serde(default)]
    capacity: Option<u32>,
}

async fn hash_off_thread(password: String) -> ApiResult<String> {
    if password.is_empty() {
        return Err(ApiError::invalid("password must not be empty"));
    }
    tokio::task::spawn_blocking(move || hash_password(&password))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))
}

async fn list_users(State(st): State<ApiState>, headers: HeaderMap) -> ApiResult<Json<Vec<UserView>>> {
    admin(&st, &headers)?;
    Ok(Json(st.engine.read().users.values().map(UserView::from).collect()))
}

async fn get_user(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<UserView>> {
    admin(&st, &headers)?;
    let state = st.engine.read();
    state
        .users
        .get(&id)
        .map(|u| Json(UserView::from(u)))
        .ok_or_else(|| ApiError::not_found(format!("user {id} not found")))
}

async fn create_user(
    State(st): State<ApiState>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<UserView>)> {
    admin(&st, &headers)?;
    let b: NewUser = parse_body(&body)?;
    if st.engine.read().users.contains_key(&b.username) {
        return Err(ApiError::invalid(format!("user {} already exists", b.username)));
    }
    let user = UserRecord {
        profile: WorkerProfile {
            name: b.name.unwrap_or_else(|| b.username.clone()),
            worker_id: b.username,
            start_location: b.start_location.unwrap_or(GeoPoint { lat: 0.0, lon: 0.0 }),
            capacity: b.capacity.unwrap_or(5),
            role: b.role,
        },
        password_hash: hash_off_thread(b.password).await?,
    };
    let view = UserView::from(&user);
    st.engine.configure(ConfigChange::UserUpsert { user }).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn patch_user(st: &ApiState, username: &str, patch: UserPatch) -> ApiResult<UserView> {
    let mut user = st
        .engine
        .read()
        .users
        .get(username)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("user {username} not found")))?;
    if let Some(pw) = patch.password {
        user.password_hash = hash_off_thread(pw).await?;
    }
    if let Some(r) = patch.role {
        user.profile.role = r;
    }
    if let Some(n) = patch.name {
        user.profile.name = n;
    }
    if let Some(l) = patch.start_location {
        user.profile.start_location = l;
    }
    if let Some(c) = patch.capacity {
        user.profile.capacity = c;
    }
    let view = UserView::from(&user);
    st.engine.configure(ConfigChange::UserUpsert { user }).await?;
    Ok(view)
}

async fn update_user(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<UserView>> {
    admin(&st, &headers)?;
    let patch: UserPatch = parse_body(&body)?;
    patch_user(&st, &id, patch).await.map(Json)
}

async fn delete_user(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<StatusCode> {
    admin(&st, &headers)?;
    st.engine
        .configure(ConfigChange::UserDelete {
            username: id.clone(),
        })
        .await?;
    st.sessions.revoke_user(&id);
    Ok(StatusCode::NO_CONTENT)
}

// ---- my profile

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MePatch {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    password: Option<String>,
}

async fn get_me(State(st): State<ApiState>, headers: HeaderMap) -> ApiResult<Json<UserView>> {
    let p = authed(&st, &headers)?;
    let state = st.engine.read();
    let u = state.users.get(&p.username).ok_or_else(ApiError::unauthorized)?;
    Ok(Json(UserView::from(u)))
}

async fn update_me(
    State(st): State<ApiState>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<UserView>> {
    let p = authed(&st, &headers)?;
    let b: MePatch = parse_body(&body)?;
    let patch = UserPatch {
        name: b.name,
        password: b.password,
        ..UserPatch::default()
    };
    patch_user(&st, &p.username, patch).await.map(Json)
}

// ---- status

async fn status(State(st): State<ApiState>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    admin(&st, &headers)?;
    let state = st.engine.read();
    Ok(Json(json!({
        "as_of_offset": state.as_of_offset,
        "snapshot_hash": state.hash(),
        "bins": state.bins.len(),
        "active_alerts": state.active_alerts().count(),
        "plan_stale": state.plan_is_stale(),
    })))
}

// ---- event stream

fn to_event(n: &Notice) -> Event {
    Event::default()
        .id(n.offset.to_string())
        .event(n.kind.as_str())
        .data(n.data.to_string())
}

/// Where a stream stands: the last offset delivered and how many of that
/// offset's notices went out.
#[derive(Clone, Copy)]
struct Cursor {
    offset: Option<u64>,
    sent_at_offset: usize,
}

impl Cursor {
    fn wants(&self, n: &Notice) -> bool {
        self.offset.is_none_or(|k| n.offset > k)
    }

    fn advance(&mut self, n: &Notice) {
        if self.offset == Some(n.offset) {
            self.sent_at_offset += 1;
        } else {
            self.offset = Some(n.offset);
            self.sent_at_offset = 1;
        }
    }
}

/// Notices from the log after `cursor`, skipping the ones already sent
/// for the cursor's own offset.
async fn backlog(engine: &Engine, cursor: Cursor, partial: bool) -> Vec<Notice> {
    let path = engine.events_path().to_owned();
    let from = match (cursor.offset, partial) {
        (Some(k), true) => k.checked_sub(1),
        (k, _) => k,
    };
    let notices = tokio::task::spawn_blocking(move || notices_from_log(&path, from))
        .await
        .ok()
        .and_then(|r| r.ok())
        .unwrap_or_default();
    if !partial {
        return notices;
    }
    let mut skip = cursor.sent_at_offset;
    notices
        .into_iter()
        .filter(|n| {
            if Some(n.offset) == cursor.offset && skip > 0 {
                skip -= 1;
                false
            } else {
                true
            }
        })
        .collect()
}

async fn pump(
    engine: Engine,
    rx: broadcast::Receiver<Notice>,
    resume: Option<u64>,
    tx: mpsc::Sender<Event>,
    mut shutdown: watch::Receiver<bool>,
) {
    if *shutdown.borrow() {
        return;
    }
    tokio::select! {
        _ = forward(engine, rx, resume, tx) => {}
        _ = shutdown.changed() => {}
    }
}

async fn forward(engine: Engine, mut rx: broadcast::Receiver<Notice>, resume: Option<u64>, tx: mpsc::Sender<Event>) {
    let mut cursor = Cursor {
        offset: resume,
        sent_at_offset: 0,
    };
    // Everything in the log up to `floor` is covered by the backlog.
    let mut floor = resume;
    if resume.is_some() {
        floor = engine.committed().checked_sub(1);
        for n in backlog(&engine, cursor, false).await {
            floor = floor.max(Some(n.offset));
            cursor.advance(&n);
            if tx.send(to_event(&n)).await.is_err() {
                return;
            }
        }
    }
    loop {
        match rx.recv().await {
            Ok(n) => {
                if floor.is_some_and(|f| n.offset <= f) || !cursor.wants(&n) && cursor.offset != Some(n.offset) {
                    continue;
                }
                cursor.advance(&n);
                if tx.send(to_event(&n)).await.is_err() {
                    return;
                }
            }
            Err(broadcast::error::RecvError::Lagged(_)) => {
                // Catch up from the log; the broadcast resumes afterwards.
                floor = engine.committed().checked_sub(1);
                for n in backlog(&engine, cursor, true).await {
                    floor = floor.max(Some(n.offset));
                    cursor.advance(&n);
                    if tx.send(to_event(&n)).await.is_err() {
                        return;
                    }
                }
            }
            Err(broadcast::error::RecvError::Closed) => return,
        }
    }
}

async fn events(
    State(st): State<ApiState>,
    headers: HeaderMap,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let token = bearer(&headers).or(q.get("token").map(String::as_str));
    principal_for(&st, token)?;
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .or(q.get("last_event_id").map(String::as_str))
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| ApiError::invalid("Last-Event-ID must be an offset"))
        })
        .transpose()?;
    let rx = st.engine.subscribe();
    let (tx, out) = mpsc::channel::<Event>(256);
    tokio::spawn(pump(st.engine.clone(), rx, resume, tx, st.shutdown.clone()));
    let stream = futures::StreamExt::map(ReceiverStream::new(out), Ok);
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
