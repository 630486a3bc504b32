//! Push notifications derived from folded events. Live fan-out and log
//! resume both go through [`notices_for`], so a client that reconnects
//! sees exactly what a connected client saw.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use tuhr_core::domain::BinRecord;
use tuhr_core::store::{replay_with, Change, EventRecord, StoreError, SystemState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NoticeKind {
    BinState,
    Alert,
    Plan,
}

impl NoticeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoticeKind::BinState => "bin_state",
            NoticeKind::Alert => "alert",
            NoticeKind::Plan => "plan",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Notice {
    pub offset: u64,
    pub kind: NoticeKind,
    pub data: Value,
}

/// Flat JSON view of a bin as served by the API.
pub fn bin_view(b: &BinRecord) -> Value {
    json!({
        "bin_id": b.config.bin_id,
        "sensor_id": b.config.sensor_id,
        "zone_id": b.config.zone_id,
        "location": b.config.location,
        "depth_cm": b.config.depth_cm,
        "full_offset_cm": b.config.full_offset_cm,
        "fill": b.fill,
        "state": b.state,
        "last_reading_ts": b.last_reading_ts,
        "last_gas_ppm": b.last_gas_ppm,
    })
}

pub fn notices_for(ev: &EventRecord, changes: &[Change], state: &SystemState) -> Vec<Notice> {
    let mut out = Vec::new();
    let mut push = |kind, data| {
        out.push(Notice {
            offset: ev.offset,
            kind,
            data,
        })
    };
    for c in changes {
        match c {
            Change::Bin(id) => {
                if let Some(b) = state.bins.get(id) {
                    push(NoticeKind::BinState, bin_view(b));
                }
            }
            Change::BinRemoved(id) => push(NoticeKind::BinState, json!({"bin_id": id, "removed": true})),
            Change::AlertRaised(a) | Change::AlertResolved(a) => {
                push(NoticeKind::Alert, serde_json::to_value(a).expect("alert serializes"))
            }
            Change::PlanStale | Change::PlanCreated => {
                if let Some(p) = &state.plan {
                    push(NoticeKind::Plan, serde_json::to_value(p).expect("plan serializes"));
                }
            }
            Change::Config => {}
        }
    }
    out
}

/// Every notice the log implies for offsets strictly after `after`.
pub fn notices_from_log(path: &Path, after: Option<u64>) -> Result<Vec<Notice>, StoreError> {
    let mut out = Vec::new();
    replay_with(path, |ev, changes, state| {
        if after.is_none_or(|k| ev.offset > k) {
            out.extend(notices_for(ev, changes, state));
        }
    })?;
    Ok(out)
}
