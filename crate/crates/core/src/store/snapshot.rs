//! Periodic state snapshots and crash recovery.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use super::log::EventLog;
use super::state::SystemState;
use super::StoreError;

pub const EVENTS_FILE: &str = "events.ndjson";
pub const SNAPSHOTS_KEPT: usize = 3;

#[derive(Serialize, Deserialize)]
struct SnapshotFile<'a> {
    offset: u64,
    hash: String,
    #[serde(borrow)]
    state: &'a RawValue,
}

pub fn events_path(dir: &Path) -> PathBuf {
    dir.join(EVENTS_FILE)
}

fn snapshot_name(offset: u64) -> String {
    format!("snapshot-{offset}.json")
}

fn parse_snapshot_name(name: &str) -> Option<u64> {
    name.strip_prefix("snapshot-")?
        .strip_suffix(".json")?
        .parse()
        .ok()
}

/// Snapshot files in `dir`, newest first.
pub fn list_snapshots(dir: &Path) -> Result<Vec<(u64, PathBuf)>, StoreError> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let entry = entry?;
        if let Some(off) = entry.file_name().to_str().and_then(parse_snapshot_name) {
            out.push((off, entry.path()));
        }
    }
    out.sort_by(|a, b| b.0.cmp(&a.0));
    Ok(out)
}

/// Atomically write a snapshot of `state`. Returns `None` for a state
/// that has folded no events.
pub fn write_snapshot(dir: &Path, state: &SystemState) -> Result<Option<PathBuf>, StoreError> {
    let Some(offset) = state.as_of_offset else {
        return Ok(None);
    };
    let body = state.canonical_json();
    let hash = hex::encode(Sha256::digest(body.as_bytes()));
    let raw = RawValue::from_string(body).expect("canonical json is valid");
    let file = SnapshotFile {
        offset,
        hash,
        state: &raw,
    };
    let path = dir.join(snapshot_name(offset));
    let tmp = dir.join(format!(".{}.tmp", snapshot_name(offset)));
    {
        let mut f = File::create(&tmp)?;
        serde_json::to_writer(&mut f, &file).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &path)?;
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(Some(path))
}

/// Read and verify one snapshot file.
pub fn read_snapshot(path: &Path) -> Result<SystemState, StoreError> {
    let corrupt = |reason: String| StoreError::CorruptSnapshot {
        path: path.to_owned(),
        reason,
    };
    let text = fs::read_to_string(path)?;
    let file: SnapshotFile = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    let digest = hex::encode(Sha256::digest(file.state.get().as_bytes()));
    if digest != file.hash {
        return Err(corrupt("hash mismatch".into()));
    }
    let state = SystemState::from_json(file.state.get()).map_err(|e| corrupt(e.to_string()))?;
    if state.as_of_offset != Some(file.offset) {
        return Err(corrupt("offset mismatch".into()));
    }
    Ok(state)
}

/// Newest snapshot that verifies. Damaged files are skipped.
pub fn load_latest(dir: &Path) -> Result<Option<SystemState>, StoreError> {
    for (_, path) in list_snapshots(dir)? {
        match read_snapshot(&path) {
            Ok(s) => return Ok(Some(s)),
            Err(StoreError::Io(e)) => return Err(StoreError::Io(e)),
            Err(e) => ::log::warn!("skipping snapshot: {e}"),
        }
    }
    Ok(None)
}

/// Delete all but the newest `keep` snapshots.
pub fn prune(dir: &Path, keep: usize) -> Result<usize, StoreError> {
    let mut removed = 0;
    for (_, path) in list_snapshots(dir)?.into_iter().skip(keep) {
        fs::remove_file(path)?;
        removed += 1;
    }
    Ok(removed)
}

#[derive(Debug)]
pub struct Recovered {
    pub state: SystemState,
    pub log: EventLog,
    /// Offset of the snapshot used, if any.
    pub snapshot_offset: Option<u64>,
    /// Events folded on top of the snapshot.
    pub replayed: u64,
}

/// Rebuild state from the newest usable snapshot plus the log tail,
/// falling back to a full replay.
pub fn recover(dir: &Path) -> Result<Recovered, StoreError> {
    fs::create_dir_all(dir)?;
    let path = events_path(dir);
    let snapshot = load_latest(dir)?;
    let snapshot_offset = snapshot.as_ref().and_then(|s| s.as_of_offset);
    let mut state = snapshot.unwrap_or_default();
    let mut replayed = 0u64;
    let log = EventLog::open(&path, |ev| {
        if snapshot_offset.is_none_or(|s| ev.offset > s) {
            state.apply(&ev);
            replayed += 1;
        }
        Ok(())
    })?;
    if let Some(s) = snapshot_offset {
        if s >= log.next_offset() {
            ::log::warn!(
                "snapshot at offset {s} is ahead of the log ({} events); replaying from scratch",
                log.next_offset()
            );
            drop(log);
            let mut state = SystemState::new();
            let mut replayed = 0u64;
            let log = EventLog::open(&path, |ev| {
                state.apply(&ev);
                replayed += 1;
                Ok(())
            })?;
            return Ok(Recovered {
                state,
                log,
                snapshot_offset: None,
                replayed,
            });
        }
    }
    Ok(Recovered {
        state,
        log,
        snapshot_offset,
        replayed,
    })
}
