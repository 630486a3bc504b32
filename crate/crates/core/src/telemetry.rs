//! Sensor wire protocol: one JSON object per LF-terminated line.
//!
//! Records look like
//! `{"v":1,"sid":"s-1","seq":7,"ts":"2025-06-01T10:00:00Z","dist_cm":55.0,"gas_ppm":12.0,"batt_pct":88.0}`
//! and every record is answered by exactly one ack line.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PROTOCOL_VERSION: i64 = 1;

/// Lines longer than this are rejected without being parsed.
pub const MAX_LINE_BYTES: usize = 16 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AckError {
    Parse,
    UnknownSensor,
    Range,
    Version,
}

impl AckError {
    pub fn as_str(self) -> &'static str {
        match self {
            AckError::Parse => "PARSE",
            AckError::UnknownSensor => "UNKNOWN_SENSOR",
            AckError::Range => "RANGE",
            AckError::Version => "VERSION",
        }
    }
}

impl std::fmt::Display for AckError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A rejected line: the error code plus the `seq` when it could be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rejection {
    pub err: AckError,
    pub seq: Option<u64>,
}

/// One sensor report. Serializes with the wire field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadingEnvelope {
    #[serde(rename = "v")]
    pub version: i64,
    #[serde(rename = "sid")]
    pub sensor_id: String,
    pub seq: u64,
    pub ts: DateTime<Utc>,
    #[serde(rename = "dist_cm")]
    pub distance_cm: f64,
    pub gas_ppm: f64,
    #[serde(rename = "batt_pct")]
    pub battery_pct: f64,
}

impl ReadingEnvelope {
    fn check_ranges(&self) -> Result<(), AckError> {
        if self.sensor_id.is_empty() {
            return Err(AckError::Range);
        }
        let finite = [self.distance_cm, self.gas_ppm, self.battery_pct]
            .iter()
            .all(|v| v.is_finite());
        if !finite
            || self.distance_cm < 0.0
            || self.gas_ppm < 0.0
            || !(0.0..=100.0).contains(&self.battery_pct)
        {
            return Err(AckError::Range);
        }
        Ok(())
    }

    /// Encode as one wire line, without the terminating newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }
}

/// Same shape as the envelope, but with the timestamp left as text so a
/// bad timestamp can be reported as a range problem rather than a parse one.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    v: i64,
    sid: String,
    seq: u64,
    ts: String,
    dist_cm: f64,
    gas_ppm: f64,
    batt_pct: f64,
}

fn parse_ts(text: &str) -> Option<DateTime<Utc>> {
    if !text.ends_with('Z') {
        return None;
    }
    DateTime::parse_from_rfc3339(text)
        .ok()
        .map(|t| t.with_timezone(&Utc))
}

/// Parse one protocol record (without its newline).
pub fn parse_record(line: &[u8]) -> Result<ReadingEnvelope, Rejection> {
    let reject = |err, seq| Rejection { err, seq };
    if line.len() > MAX_LINE_BYTES {
        return Err(reject(AckError::Parse, None));
    }
    let text = std::str::from_utf8(line).map_err(|_| reject(AckError::Parse, None))?;
    let value: Value = serde_json::from_str(text).map_err(|_| reject(AckError::Parse, None))?;
    let Value::Object(map) = &value else {
        return Err(reject(AckError::Parse, None));
    };
    let seq = map.get("seq").and_then(Value::as_u64);
    match map.get("v").and_then(Value::as_i64) {
        None => return Err(reject(AckError::Parse, seq)),
        Some(PROTOCOL_VERSION) => {}
        Some(_) => return Err(reject(AckError::Version, seq)),
    }
    let raw: RawRecord = serde_json::from_value(value).map_err(|_| reject(AckError::Parse, seq))?;
    let ts = parse_ts(&raw.ts).ok_or(reject(AckError::Range, seq))?;
    let env = ReadingEnvelope {
        version: raw.v,
        sensor_id: raw.sid,
        seq: raw.seq,
        ts,
        distance_cm: raw.dist_cm,
        gas_ppm: raw.gas_ppm,
        battery_pct: raw.batt_pct,
    };
    env.check_ranges().map_err(|e| reject(e, seq))?;
    Ok(env)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AckRecord {
    pub ok: bool,
    pub seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err: Option<AckError>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub dup: bool,
}

impl AckRecord {
    pub fn accepted(seq: u64) -> Self {
        AckRecord {
            ok: true,
            seq: Some(seq),
            err: None,
            dup: false,
        }
    }

    pub fn duplicate(seq: u64) -> Self {
        AckRecord {
            dup: true,
            ..AckRecord::accepted(seq)
        }
    }

    pub fn rejected(err: AckError, seq: Option<u64>) -> Self {
        AckRecord {
            ok: false,
            seq,
            err: Some(err),
            dup: false,
        }
    }
}

impl From<Rejection> for AckRecord {
    fn from(r: Rejection) -> Self {
        AckRecord::rejected(r.err, r.seq)
    }
}

/// One newline-terminated ack line.
pub fn serialize_ack(ack: &AckRecord) -> Vec<u8> {
    let mut out = serde_json::to_vec(ack).expect("ack serializes");
    out.push(b'\n');
    out
}

pub fn parse_ack(line: &[u8]) -> Result<AckRecord, serde_json::Error> {
    serde_json::from_slice(line)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freshness {
    Fresh,
    Duplicate,
}

/// Accepted sequence numbers of one sensor: everything below `floor`,
/// plus a sparse set of values above it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqWindow {
    pub floor: u64,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub tail: BTreeSet<u64>,
}

impl SeqWindow {
    pub fn contains(&self, seq: u64) -> bool {
        seq < self.floor || self.tail.contains(&seq)
    }

    /// Returns false if `seq` was already present.
    pub fn insert(&mut self, seq: u64) -> bool {
        if self.contains(seq) {
            return false;
        }
        if seq == self.floor {
            self.floor += 1;
            while self.tail.remove(&self.floor) {
                self.floor += 1;
            }
        } else {
            self.tail.insert(seq);
        }
        true
    }
}

/// Per-sensor record of accepted `seq` values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DedupeIndex {
    sensors: BTreeMap<String, SeqWindow>,
}

impl DedupeIndex {
    /// Classify `(sensor_id, seq)` and mark it accepted when fresh.
    pub fn check_duplicate(&mut self, sensor_id: &str, seq: u64) -> Freshness {
        let window = match self.sensors.get_mut(sensor_id) {
            Some(w) => w,
            None => self.sensors.entry(sensor_id.to_owned()).or_default(),
        };
        if window.insert(seq) {
            Freshness::Fresh
        } else {
            Freshness::Duplicate
        }
    }

    pub fn is_duplicate(&self, sensor_id: &str, seq: u64) -> bool {
        self.sensors
            .get(sensor_id)
            .is_some_and(|w| w.contains(seq))
    }

    pub fn forget(&mut self, sensor_id: &str) {
        self.sensors.remove(sensor_id);
    }

    pub fn window(&self, sensor_id: &str) -> Option<&SeqWindow> {
        self.sensors.get(sensor_id)
    }
}
