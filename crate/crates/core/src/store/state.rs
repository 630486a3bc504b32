//! The projection of the event log: everything the system knows, rebuilt
//! by folding events in offset order.

use std::collections::{BTreeMap, HashMap, VecDeque};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::event::{
    AlertResolution, BinEmptied, ConfigChange, EventPayload, EventRecord, ReadingAccepted,
    UserRecord,
};
use crate::alerting::{evaluate_transition, on_fresh_reading, AlertAction, AlertEvent, AlertKind, OpenAlerts};
use crate::dispatch::DispatchPlan;
use crate::domain::{apply_reading, mark_emptied, BinRecord, Role, Thresholds, WorkerProfile, Zone};
use crate::telemetry::{DedupeIndex, Freshness, ReadingEnvelope};

/// Accepted readings kept per sensor for the reads view.
pub const READS_PER_SENSOR: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadEntry {
    pub offset: u64,
    pub bin_id: String,
    pub reading: ReadingEnvelope,
}

/// What a folded event changed. Used to drive notifications.
#[derive(Debug, Clone, PartialEq)]
pub enum Change {
    Bin(String),
    BinRemoved(String),
    AlertRaised(AlertEvent),
    AlertResolved(AlertEvent),
    PlanStale,
    PlanCreated,
    Config,
}

/// Why a configuration change cannot be applied.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0} already exists")]
    Duplicate(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Admission<'a> {
    UnknownSensor,
    Duplicate,
    Accept(&'a BinRecord),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub as_of_offset: Option<u64>,
    pub thresholds: Thresholds,
    pub zones: BTreeMap<String, Zone>,
    pub bins: BTreeMap<String, BinRecord>,
    /// sensor id to bin id
    pub sensors: BTreeMap<String, String>,
    pub users: BTreeMap<String, UserRecord>,
    /// Every alert ever raised, in raise order.
    pub alerts: Vec<AlertEvent>,
    pub plan: Option<DispatchPlan>,
    pub dedupe: DedupeIndex,
    pub reads: BTreeMap<String, VecDeque<ReadEntry>>,
    #[serde(skip)]
    open: OpenAlerts,
    #[serde(skip)]
    alert_pos: HashMap<String, usize>,
}

pub fn alert_id(kind: AlertKind, offset: u64) -> String {
    format!("{}-{}", kind.as_str(), offset)
}

impl SystemState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Restore derived indexes after deserializing.
    pub fn rebuild_indexes(&mut self) {
        self.open = OpenAlerts::default();
        self.alert_pos.clear();
        for (pos, a) in self.alerts.iter().enumerate() {
            self.alert_pos.insert(a.alert_id.clone(), pos);
            if a.is_open() {
                self.open.insert(&a.bin_id, a.kind, &a.alert_id);
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let mut s: SystemState = serde_json::from_str(text)?;
        s.rebuild_indexes();
        Ok(s)
    }

    pub fn open_alerts(&self) -> &OpenAlerts {
        &self.open
    }

    pub fn alert(&self, alert_id: &str) -> Option<&AlertEvent> {
        self.alert_pos.get(alert_id).map(|&p| &self.alerts[p])
    }

    pub fn active_alerts(&self) -> impl Iterator<Item = &AlertEvent> {
        self.alerts.iter().filter(|a| a.is_open())
    }

    pub fn bin_for_sensor(&self, sensor_id: &str) -> Option<&BinRecord> {
        self.sensors.get(sensor_id).and_then(|b| self.bins.get(b))
    }

    pub fn workers(&self) -> Vec<WorkerProfile> {
        self.users
            .values()
            .filter(|u| u.profile.role == Role::Worker)
            .map(|u| u.profile.clone())
            .collect()
    }

    pub fn plan_is_stale(&self) -> bool {
        self.plan.as_ref().is_some_and(|p| p.stale)
    }

    /// How the fold would treat a reading from `env.sensor_id`.
    pub fn admission(&self, env: &ReadingEnvelope) -> Admission<'_> {
        match self.sensors.get(&env.sensor_id) {
            None => Admission::UnknownSensor,
            Some(_) if self.dedupe.is_duplicate(&env.sensor_id, env.seq) => Admission::Duplicate,
            Some(bin_id) => Admission::Accept(&self.bins[bin_id]),
        }
    }

    /// Canonical serialization: keys sorted at every level.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("state serializes");
        canonicalize(value).to_string()
    }

    /// Hex SHA-256 of [`SystemState::canonical_json`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Fold one event. Offsets must arrive in order.
    pub fn apply(&mut self, ev: &EventRecord) -> Vec<Change> {
        let mut changes = Vec::new();
        match &ev.payload {
            EventPayload::ReadingAccepted(p) => self.apply_reading(ev.offset, p, &mut changes),
            EventPayload::BinEmptied(p) => self.apply_emptied(ev.offset, ev.ts, p, &mut changes),
            EventPayload::AlertRaised(a) => {
                if let Some(c) = self.raise(a.clone()) {
                    changes.push(c);
                    if a.kind == AlertKind::FullBin {
                        self.mark_plan_stale(&mut changes);
                    }
                }
            }
            EventPayload::AlertResolved(r) => {
                changes.extend(self.resolve(&r.alert_id, r.resolved_ts));
            }
            EventPayload::PlanCreated(plan) => {
                let mut plan = plan.clone();
                plan.stale = false;
                self.plan = Some(plan);
                changes.push(Change::PlanCreated);
            }
            EventPayload::ConfigChanged(c) => self.apply_config(ev.ts, c, &mut changes),
        }
        self.as_of_offset = Some(ev.offset);
        changes
    }

    fn apply_reading(&mut self, offset: u64, p: &ReadingAccepted, changes: &mut Vec<Change>) {
        let env = &p.reading;
        if self.sensors.get(&env.sensor_id) != Some(&p.bin_id) {
            return;
        }
        if self.dedupe.check_duplicate(&env.sensor_id, env.seq) == Freshness::Duplicate {
            return;
        }
        let before = self.bins[&p.bin_id].clone();
        let fresh = before.last_reading_ts.is_none_or(|last| env.ts > last);
        let after = apply_reading(&before, env.distance_cm, env.gas_ppm, env.ts, &self.thresholds);
        self.bins.insert(p.bin_id.clone(), after.clone());
        changes.push(Change::Bin(p.bin_id.clone()));

        let log = self.reads.entry(env.sensor_id.clone()).or_default();
        log.push_back(ReadEntry {
            offset,
            bin_id: p.bin_id.clone(),
            reading: env.clone(),
        });
        while log.len() > READS_PER_SENSOR {
            log.pop_front();
        }

        let mut actions = Vec::new();
        if fresh {
            actions.extend(on_fresh_reading(&p.bin_id, env.ts, &self.open));
        }
        actions.extend(evaluate_transition(&before, &after, &self.thresholds, &self.open));
        self.apply_actions(offset, actions, changes);
    }

    fn apply_emptied(
        &mut self,
        offset: u64,
        ts: DateTime<Utc>,
        p: &BinEmptied,
        changes: &mut Vec<Change>,
    ) {
        let Some(before) = self.bins.get(&p.bin_id).cloned() else {
            return;
        };
        let Ok(after) = mark_emptied(&before, ts) else {
            return;
        };
        self.bins.insert(p.bin_id.clone(), after.clone());
        changes.push(Change::Bin(p.bin_id.clone()));
        let actions = evaluate_transition(&before, &after, &self.thresholds, &self.open);
        self.apply_actions(offset, actions, changes);
        self.mark_plan_stale(changes);
    }

    fn apply_actions(&mut self, offset: u64, actions: Vec<AlertAction>, changes: &mut Vec<Change>) {
        for action in actions {
            match action {
                AlertAction::Raise {
                    kind,
                    bin_id,
                    ts,
                    detail,
                } => {
                    let alert = AlertEvent {
                        alert_id: alert_id(kind, offset),
                        kind,
                        bin_id,
                        raised_ts: ts,
                        resolved_ts: None,
                        detail,
                    };
                    if let Some(c) = self.raise(alert) {
                        changes.push(c);
                        if kind == AlertKind::FullBin {
                            self.mark_plan_stale(changes);
                        }
                    }
                }
                AlertAction::Resolve { alert_id, ts, .. } => {
                    changes.extend(self.resolve(&alert_id, ts));
                }
            }
        }
    }

    fn raise(&mut self, alert: AlertEvent) -> Option<Change> {
        if self.alert_pos.contains_key(&alert.alert_id)
            || self.open.contains(&alert.bin_id, alert.kind)
            || !self.bins.contains_key(&alert.bin_id)
        {
            return None;
        }
        self.open.insert(&alert.bin_id, alert.kind, &alert.alert_id);
        self.alert_pos.insert(alert.alert_id.clone(), self.alerts.len());
        self.alerts.push(alert.clone());
        Some(Change::AlertRaised(alert))
    }

    fn resolve(&mut self, alert_id: &str, ts: DateTime<Utc>) -> Option<Change> {
        let pos = *self.alert_pos.get(alert_id)?;
        let alert = &mut self.alerts[pos];
        if !alert.is_open() {
            return None;
        }
        alert.resolved_ts = Some(ts.max(alert.raised_ts));
        let (bin, kind) = (alert.bin_id.clone(), alert.kind);
        self.open.remove(&bin, kind);
        Some(Change::AlertResolved(self.alerts[pos].clone()))
    }

    fn mark_plan_stale(&mut self, changes: &mut Vec<Change>) {
        if let Some(plan) = self.plan.as_mut() {
            if !plan.stale {
                plan.stale = true;
                changes.push(Change::PlanStale);
            }
        }
    }

    fn apply_config(&mut self, ts: DateTime<Utc>, c: &ConfigChange, changes: &mut Vec<Change>) {
        match c {
            ConfigChange::ZoneUpsert { zone } => {
                self.zones.insert(zone.zone_id.clone(), zone.clone());
            }
            ConfigChange::ZoneDelete { zone_id } => {
                self.zones.remove(zone_id);
            }
            ConfigChange::BinUpsert { bin } => {
                match self.bins.get_mut(&bin.bin_id) {
                    Some(rec) => {
                        if rec.config.sensor_id != bin.sensor_id {
                            self.sensors.remove(&rec.config.sensor_id);
                            self.dedupe.forget(&rec.config.sensor_id);
                            self.reads.remove(&rec.config.sensor_id);
                        }
                        rec.config = bin.clone();
                    }
                    None => {
                        self.bins
                            .insert(bin.bin_id.clone(), BinRecord::new(bin.clone()));
                    }
                }
                self.sensors
                    .insert(bin.sensor_id.clone(), bin.bin_id.clone());
                changes.push(Change::Bin(bin.bin_id.clone()));
            }
            ConfigChange::BinDelete { bin_id } => {
                let open: Vec<String> = self
                    .open
                    .iter()
                    .filter(|(b, _, _)| *b == bin_id.as_str())
                    .map(|(_, _, id)| id.to_owned())
                    .collect();
                for id in open {
                    changes.extend(self.resolve(&id, ts));
                }
                if let Some(rec) = self.bins.remove(bin_id) {
                    self.sensors.remove(&rec.config.sensor_id);
                    self.dedupe.forget(&rec.config.sensor_id);
                    self.reads.remove(&rec.config.sensor_id);
                    changes.push(Change::BinRemoved(bin_id.clone()));
                    let planned = self
                        .plan
                        .as_ref()
                        .is_some_and(|p| p.routes.iter().any(|r| r.stops.contains(bin_id)));
                    if planned {
                        self.mark_plan_stale(changes);
                    }
                }
            }
            ConfigChange::UserUpsert { user } => {
                self.users
                    .insert(user.username().to_owned(), user.clone());
            }
            ConfigChange::UserDelete { username } => {
                self.users.remove(username);
            }
            ConfigChange::ThresholdsSet { thresholds } => {
                self.thresholds = *thresholds;
            }
        }
        changes.push(Change::Config);
    }

    /// Check a configuration change against the current state.
    pub fn validate_config(&self, c: &ConfigChange) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        match c {
            ConfigChange::ZoneUpsert { zone } => zone.validate().map_err(|e| invalid(&e)),
            ConfigChange::ZoneDelete { zone_id } => {
                if !self.zones.contains_key(zone_id) {
                    return Err(ConfigError::NotFound(format!("zone {zone_id}")));
                }
                if self.bins.values().any(|b| &b.config.zone_id == zone_id) {
                    return Err(ConfigError::Conflict(format!("zone {zone_id} still has bins")));
                }
                Ok(())
            }
            ConfigChange::BinUpsert { bin } => {
                bin.validate().map_err(|e| invalid(&e))?;
                if !self.zones.contains_key(&bin.zone_id) {
                    return Err(ConfigError::Invalid(format!("unknown zone {}", bin.zone_id)));
                }
                if let Some(other) = self.sensors.get(&bin.sensor_id) {
                    if other != &bin.bin_id {
                        return Err(ConfigError::Duplicate(format!("sensor {}", bin.sensor_id)));
                    }
                }
                Ok(())
            }
            ConfigChange::BinDelete { bin_id } => {
                if self.bins.contains_key(bin_id) {
                    Ok(())
                } else {
                    Err(ConfigError::NotFound(format!("bin {bin_id}")))
                }
            }
            ConfigChange::UserUpsert { user } => {
                user.profile.validate().map_err(|e| invalid(&e))?;
                let demoting = self
                    .users
                    .get(user.username())
                    .is_some_and(|u| u.profile.role == Role::Admin && user.profile.role != Role::Admin);
                if demoting && self.admin_count() == 1 {
                    return Err(ConfigError::Conflict("cannot demote the last admin".into()));
                }
                Ok(())
            }
            ConfigChange::UserDelete { username } => {
                let Some(u) = self.users.get(username) else {
                    return Err(ConfigError::NotFound(format!("user {username}")));
                };
                if u.profile.role == Role::Admin && self.admin_count() == 1 {
                    return Err(ConfigError::Conflict("cannot delete the last admin".into()));
                }
                Ok(())
            }
            ConfigChange::ThresholdsSet { thresholds } => {
                thresholds.validate().map_err(|e| invalid(&e))
            }
        }
    }

    fn admin_count(&self) -> usize {
        self.users
            .values()
            .filter(|u| u.profile.role == Role::Admin)
            .count()
    }
}

/// Rebuild a JSON value with object keys in sorted order.
pub fn canonicalize(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> =
                map.into_iter().map(|(k, v)| (k, canonicalize(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

/// Resolution payload for an alert that the fold just closed.
pub fn resolution_of(alert: &AlertEvent) -> Option<AlertResolution> {
    Some(AlertResolution {
        alert_id: alert.alert_id.clone(),
        kind: alert.kind,
        bin_id: alert.bin_id.clone(),
        resolved_ts: alert.resolved_ts?,
    })
}
