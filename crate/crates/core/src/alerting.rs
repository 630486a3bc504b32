//! Edge-triggered alert detection.
//!
//! These functions only decide what should happen; ids are assigned and
//! the alert book is updated by the store when the resulting events are
//! folded.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{BinRecord, BinState, Thresholds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertKind {
    FullBin,
    Gas,
    SensorOffline,
}

impl AlertKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AlertKind::FullBin => "FULL_BIN",
            AlertKind::Gas => "GAS",
            AlertKind::SensorOffline => "SENSOR_OFFLINE",
        }
    }
}

impl std::fmt::Display for AlertKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub alert_id: String,
    pub kind: AlertKind,
    pub bin_id: String,
    pub raised_ts: DateTime<Utc>,
    pub resolved_ts: Option<DateTime<Utc>>,
    pub detail: String,
}

impl AlertEvent {
    pub fn is_open(&self) -> bool {
        self.resolved_ts.is_none()
    }
}

/// Unresolved alerts keyed by `(bin_id, kind)`; values are alert ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpenAlerts {
    by_key: BTreeMap<(String, AlertKind), String>,
}

impl OpenAlerts {
    pub fn get(&self, bin_id: &str, kind: AlertKind) -> Option<&str> {
        self.by_key
            .get(&(bin_id.to_owned(), kind))
            .map(String::as_str)
    }

    pub fn contains(&self, bin_id: &str, kind: AlertKind) -> bool {
        self.get(bin_id, kind).is_some()
    }

    pub fn insert(&mut self, bin_id: &str, kind: AlertKind, alert_id: &str) {
        self.by_key
            .insert((bin_id.to_owned(), kind), alert_id.to_owned());
    }

    pub fn remove(&mut self, bin_id: &str, kind: AlertKind) -> Option<String> {
        self.by_key.remove(&(bin_id.to_owned(), kind))
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, AlertKind, &str)> {
        self.by_key
            .iter()
            .map(|((b, k), id)| (b.as_str(), *k, id.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum AlertAction {
    Raise {
        kind: AlertKind,
        bin_id: String,
        ts: DateTime<Utc>,
        detail: String,
    },
    Resolve {
        alert_id: String,
        kind: AlertKind,
        bin_id: String,
        ts: DateTime<Utc>,
    },
}

impl AlertAction {
    pub fn kind(&self) -> AlertKind {
        match self {
            AlertAction::Raise { kind, .. } | AlertAction::Resolve { kind, .. } => *kind,
        }
    }

    pub fn bin_id(&self) -> &str {
        match self {
            AlertAction::Raise { bin_id, .. } | AlertAction::Resolve { bin_id, .. } => bin_id,
        }
    }
}

fn transition_ts(after: &BinRecord) -> DateTime<Utc> {
    after.last_reading_ts.unwrap_or(DateTime::<Utc>::UNIX_EPOCH)
}

/// Alerts implied by one bin moving from `before` to `after`.
pub fn evaluate_transition(
    before: &BinRecord,
    after: &BinRecord,
    t: &Thresholds,
    open: &OpenAlerts,
) -> Vec<AlertAction> {
    let bin_id = after.bin_id();
    let ts = transition_ts(after);
    let mut actions = Vec::new();

    let full_open = open.get(bin_id, AlertKind::FullBin);
    if after.state == BinState::Full && before.state != BinState::Full && full_open.is_none() {
        actions.push(AlertAction::Raise {
            kind: AlertKind::FullBin,
            bin_id: bin_id.to_owned(),
            ts,
            detail: format!("fill {:.1}%", after.fill * 100.0),
        });
    } else if after.state != BinState::Full {
        if let Some(id) = full_open {
            actions.push(AlertAction::Resolve {
                alert_id: id.to_owned(),
                kind: AlertKind::FullBin,
                bin_id: bin_id.to_owned(),
                ts,
            });
        }
    }

    let gas_open = open.get(bin_id, AlertKind::Gas);
    let hot_before = before.last_gas_ppm >= t.gas_alert_ppm;
    let hot_after = after.last_gas_ppm >= t.gas_alert_ppm;
    if hot_after && !hot_before && gas_open.is_none() {
        actions.push(AlertAction::Raise {
            kind: AlertKind::Gas,
            bin_id: bin_id.to_owned(),
            ts,
            detail: format!("gas {} ppm", after.last_gas_ppm),
        });
    } else if !hot_after {
        if let Some(id) = gas_open {
            actions.push(AlertAction::Resolve {
                alert_id: id.to_owned(),
                kind: AlertKind::Gas,
                bin_id: bin_id.to_owned(),
                ts,
            });
        }
    }
    actions
}

/// Resolution of an offline alert once the sensor is heard from again.
pub fn on_fresh_reading(bin_id: &str, ts: DateTime<Utc>, open: &OpenAlerts) -> Option<AlertAction> {
    open.get(bin_id, AlertKind::SensorOffline)
        .map(|id| AlertAction::Resolve {
            alert_id: id.to_owned(),
            kind: AlertKind::SensorOffline,
            bin_id: bin_id.to_owned(),
            ts,
        })
}

/// Raise SENSOR_OFFLINE for bins silent longer than `timeout`.
///
/// Bins that have never reported are not considered.
pub fn offline_scan<'a>(
    now: DateTime<Utc>,
    bins: impl IntoIterator<Item = &'a BinRecord>,
    timeout: Duration,
    open: &OpenAlerts,
) -> Vec<AlertAction> {
    assert!(timeout > Duration::zero(), "offline timeout must be positive");
    let cutoff = now - timeout;
    bins.into_iter()
        .filter_map(|b| {
            let last = b.last_reading_ts?;
            if last < cutoff && !open.contains(b.bin_id(), AlertKind::SensorOffline) {
                Some(AlertAction::Raise {
                    kind: AlertKind::SensorOffline,
                    bin_id: b.bin_id().to_owned(),
                    ts: now,
                    detail: format!("silent for {} s", (now - last).num_seconds()),
                })
            } else {
                None
            }
        })
        .collect()
}
