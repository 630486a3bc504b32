//! Bins, zones, workers and the fill-level state machine.
//!
//! Everything here is a plain value; mutation of the live system happens
//! in the store, which folds events through these functions.

use chrono::{DateTime, Utc};
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoError, GeoPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("timestamp {ts} is older than the bin's last reading {last}")]
    StaleTimestamp {
        ts: DateTime<Utc>,
        last: DateTime<Utc>,
    },
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error(transparent)]
    Geo(#[from] GeoError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> DomainError {
    DomainError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Level thresholds, all as fractions of usable bin depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub empty_below: f64,
    pub almost_full_at: f64,
    pub full_at: f64,
    pub hysteresis: f64,
    pub gas_alert_ppm: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            empty_below: 0.05,
            almost_full_at: 0.50,
            full_at: 0.90,
            hysteresis: 0.05,
            gas_alert_ppm: 300.0,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), DomainError> {
        let all = [
            self.empty_below,
            self.almost_full_at,
            self.full_at,
            self.hysteresis,
            self.gas_alert_ppm,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(invalid("thresholds", "all values must be finite"));
        }
        if !(0.0 <= self.empty_below
            && self.empty_below < self.almost_full_at
            && self.almost_full_at < self.full_at
            && self.full_at <= 1.0)
        {
            return Err(invalid(
                "thresholds",
                "need 0 <= empty_below < almost_full_at < full_at <= 1",
            ));
        }
        if self.hysteresis < 0.0 || self.hysteresis >= self.almost_full_at - self.empty_below {
            return Err(invalid(
                "hysteresis",
                "need 0 <= hysteresis < almost_full_at - empty_below",
            ));
        }
        if self.gas_alert_ppm <= 0.0 {
            return Err(invalid("gas_alert_ppm", "must be positive"));
        }
        Ok(())
    }

    /// The fill at which `state` is entered from below. `None` for EMPTY.
    pub fn entry_threshold(&self, state: BinState) -> Option<f64> {
        match state {
            BinState::Empty => None,
            BinState::Partial => Some(self.empty_below),
            BinState::AlmostFull => Some(self.almost_full_at),
            BinState::Full => Some(self.full_at),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BinState {
    Empty,
    Partial,
    AlmostFull,
    Full,
}

impl BinState {
    pub const ALL: [BinState; 4] = [
        BinState::Empty,
        BinState::Partial,
        BinState::AlmostFull,
        BinState::Full,
    ];

    fn rank(self) -> u8 {
        self as u8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BinState::Empty => "EMPTY",
            BinState::Partial => "PARTIAL",
            BinState::AlmostFull => "ALMOST_FULL",
            BinState::Full => "FULL",
        }
    }
}

impl std::fmt::Display for BinState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Static description of one container and its ultrasonic sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinConfig {
    pub bin_id: String,
    pub sensor_id: String,
    pub location: GeoPoint,
    pub zone_id: String,
    /// Sensor reading when the bin is empty.
    pub depth_cm: f64,
    /// Sensor reading when the bin is full.
    pub full_offset_cm: f64,
}

impl BinConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.bin_id.is_empty() {
            return Err(invalid("bin_id", "must not be empty"));
        }
        if self.sensor_id.is_empty() {
            return Err(invalid("sensor_id", "must not be empty"));
        }
        if self.zone_id.is_empty() {
            return Err(invalid("zone_id", "must not be empty"));
        }
        self.location.validate()?;
        if !(self.full_offset_cm.is_finite() && self.full_offset_cm > 0.0) {
            return Err(invalid("full_offset_cm", "must be a positive length"));
        }
        if !(self.depth_cm.is_finite() && self.depth_cm > self.full_offset_cm) {
            return Err(invalid("depth_cm", "must exceed full_offset_cm"));
        }
        Ok(())
    }

    pub fn fill_for_distance(&self, distance_cm: f64) -> f64 {
        distance_to_fill(distance_cm, self.depth_cm, self.full_offset_cm)
    }

    /// Inverse of [`BinConfig::fill_for_distance`] on `[0, 1]`.
    pub fn distance_for_fill(&self, fill: f64) -> f64 {
        self.depth_cm - fill * (self.depth_cm - self.full_offset_cm)
    }
}

/// Linear map from an ultrasonic distance to a fill fraction, clamped to `[0, 1]`.
pub fn distance_to_fill<T: Float>(distance_cm: T, depth_cm: T, full_offset_cm: T) -> T {
    let f = (depth_cm - distance_cm) / (depth_cm - full_offset_cm);
    f.max(T::zero()).min(T::one())
}

/// Classify a fill fraction given the bin's previous state.
///
/// Upward moves are immediate. A move exactly one level down is held back
/// while the fill is still within `hysteresis` of the threshold at which
/// the previous state was entered.
pub fn classify_fill(fill: f64, prev: BinState, t: &Thresholds) -> BinState {
    let base = if fill < t.empty_below {
        BinState::Empty
    } else if fill < t.almost_full_at {
        BinState::Partial
    } else if fill < t.full_at {
        BinState::AlmostFull
    } else {
        BinState::Full
    };
    if base.rank() + 1 == prev.rank() {
        if let Some(entered_at) = t.entry_threshold(prev) {
            if fill > entered_at - t.hysteresis {
                return prev;
            }
        }
    }
    base
}

/// Live state of one bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRecord {
    pub config: BinConfig,
    pub fill: f64,
    pub state: BinState,
    pub last_reading_ts: Option<DateTime<Utc>>,
    pub last_gas_ppm: f64,
}

impl BinRecord {
    pub fn new(config: BinConfig) -> Self {
        BinRecord {
            config,
            fill: 0.0,
            state: BinState::Empty,
            last_reading_ts: None,
            last_gas_ppm: 0.0,
        }
    }

    pub fn bin_id(&self) -> &str {
        &self.config.bin_id
    }

    fn is_fresh(&self, ts: DateTime<Utc>) -> bool {
        self.last_reading_ts.is_none_or(|last| ts > last)
    }
}

/// Fold one sensor reading into a bin record. Readings not newer than the
/// last one are ignored.
pub fn apply_reading(
    rec: &BinRecord,
    distance_cm: f64,
    gas_ppm: f64,
    ts: DateTime<Utc>,
    t: &Thresholds,
) -> BinRecord {
    if !rec.is_fresh(ts) {
        return rec.clone();
    }
    let fill = rec.config.fill_for_distance(distance_cm);
    BinRecord {
        config: rec.config.clone(),
        fill,
        state: classify_fill(fill, rec.state, t),
        last_reading_ts: Some(ts),
        last_gas_ppm: gas_ppm,
    }
}

/// Record that a worker emptied the bin.
pub fn mark_emptied(rec: &BinRecord, ts: DateTime<Utc>) -> Result<BinRecord, DomainError> {
    if let Some(last) = rec.last_reading_ts {
        if ts < last {
            return Err(DomainError::StaleTimestamp { ts, last });
        }
    }
    Ok(BinRecord {
        config: rec.config.clone(),
        fill: 0.0,
        state: BinState::Empty,
        last_reading_ts: Some(ts),
        last_gas_ppm: rec.last_gas_ppm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Worker,
    Admin,
}

fn default_capacity() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub worker_id: String,
    pub name: String,
    pub start_location: GeoPoint,
    /// Maximum bins per dispatch round.
    #[serde(default = "default_capacity")]
    pub capacity: u32,
    pub role: Role,
}

impl WorkerProfile {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.worker_id.is_empty() {
            return Err(invalid("worker_id", "must not be empty"));
        }
        if self.capacity < 1 {
            return Err(invalid("capacity", "must be at least 1"));
        }
        self.start_location.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Zone {
    pub zone_id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
}

impl Zone {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.zone_id.is_empty() {
            return Err(invalid("zone_id", "must not be empty"));
        }
        Ok(())
    }
}
