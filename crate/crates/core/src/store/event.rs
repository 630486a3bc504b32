use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::alerting::{AlertEvent, AlertKind};
use crate::dispatch::DispatchPlan;
use crate::domain::{BinConfig, Thresholds, WorkerProfile, Zone};
use crate::telemetry::ReadingEnvelope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    ReadingAccepted,
    BinEmptied,
    AlertRaised,
    AlertResolved,
    PlanCreated,
    ConfigChanged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadingAccepted {
    pub bin_id: String,
    pub reading: ReadingEnvelope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEmptied {
    pub bin_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertResolution {
    pub alert_id: String,
    pub kind: AlertKind,
    pub bin_id: String,
    pub resolved_ts: DateTime<Utc>,
}

/// A login plus its worker profile. The username is `profile.worker_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub profile: WorkerProfile,
    pub password_hash: String,
}

impl UserRecord {
    pub fn username(&self) -> &str {
        &self.profile.worker_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ConfigChange {
    ZoneUpsert { zone: Zone },
    ZoneDelete { zone_id: String },
    /// Registers or updates a sensor together with the bin it sits in.
    BinUpsert { bin: BinConfig },
    BinDelete { bin_id: String },
    UserUpsert { user: UserRecord },
    UserDelete { username: String },
    ThresholdsSet { thresholds: Thresholds },
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventPayload {
    ReadingAccepted(ReadingAccepted),
    BinEmptied(BinEmptied),
    AlertRaised(AlertEvent),
    AlertResolved(AlertResolution),
    PlanCreated(DispatchPlan),
    ConfigChanged(ConfigChange),
}

impl EventPayload {
    pub fn kind(&self) -> EventKind {
        match self {
            EventPayload::ReadingAccepted(_) => EventKind::ReadingAccepted,
            EventPayload::BinEmptied(_) => EventKind::BinEmptied,
            EventPayload::AlertRaised(_) => EventKind::AlertRaised,
            EventPayload::AlertResolved(_) => EventKind::AlertResolved,
            EventPayload::PlanCreated(_) => EventKind::PlanCreated,
            EventPayload::ConfigChanged(_) => EventKind::ConfigChanged,
        }
    }

    fn to_value(&self) -> Value {
        let v = match self {
            EventPayload::ReadingAccepted(p) => serde_json::to_value(p),
            EventPayload::BinEmptied(p) => serde_json::to_value(p),
            EventPayload::AlertRaised(p) => serde_json::to_value(p),
            EventPayload::AlertResolved(p) => serde_json::to_value(p),
            EventPayload::PlanCreated(p) => serde_json::to_value(p),
            EventPayload::ConfigChanged(p) => serde_json::to_value(p),
        };
        v.expect("event payloads serialize")
    }

    fn from_value(kind: EventKind, v: Value) -> Result<Self, serde_json::Error> {
        Ok(match kind {
            EventKind::ReadingAccepted => EventPayload::ReadingAccepted(serde_json::from_value(v)?),
            EventKind::BinEmptied => EventPayload::BinEmptied(serde_json::from_value(v)?),
            EventKind::AlertRaised => EventPayload::AlertRaised(serde_json::from_value(v)?),
            EventKind::AlertResolved => EventPayload::AlertResolved(serde_json::from_value(v)?),
            EventKind::PlanCreated => EventPayload::PlanCreated(serde_json::from_value(v)?),
            EventKind::ConfigChanged => EventPayload::ConfigChanged(serde_json::from_value(v)?),
        })
    }
}

/// One line of `events.ndjson`: `{"offset":..,"ts":..,"kind":..,"payload":{..}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RawEvent", try_from = "RawEvent")]
pub struct EventRecord {
    pub offset: u64,
    pub ts: DateTime<Utc>,
    pub payload: EventPayload,
}

impl EventRecord {
    pub fn kind(&self) -> EventKind {
        self.payload.kind()
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct RawEvent {
    offset: u64,
    ts: DateTime<Utc>,
    kind: EventKind,
    payload: Value,
}

impl From<EventRecord> for RawEvent {
    fn from(e: EventRecord) -> Self {
        RawEvent {
            offset: e.offset,
            ts: e.ts,
            kind: e.payload.kind(),
            payload: e.payload.to_value(),
        }
    }
}

impl TryFrom<RawEvent> for EventRecord {
    type Error = serde_json::Error;

    fn try_from(raw: RawEvent) -> Result<Self, Self::Error> {
        Ok(EventRecord {
            offset: raw.offset,
            ts: raw.ts,
            payload: EventPayload::from_value(raw.kind, raw.payload)?,
        })
    }
}
