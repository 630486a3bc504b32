//! Event-sourced persistence: an append-only log plus snapshots.

mod event;
mod log;
mod snapshot;
mod state;

use std::path::PathBuf;

use thiserror::Error;

pub use self::event::{
    AlertResolution, BinEmptied, ConfigChange, EventKind, EventPayload, EventRecord,
    ReadingAccepted, UserRecord,
};
pub use self::log::{replay, replay_until, replay_with, scan_log, EventLog, ScanInfo};
pub use self::snapshot::{
    events_path, list_snapshots, load_latest, prune, read_snapshot, recover, write_snapshot,
    Recovered, EVENTS_FILE, SNAPSHOTS_KEPT,
};
pub use self::state::{
    alert_id, canonicalize, resolution_of, Admission, Change, ConfigError, ReadEntry, SystemState,
    READS_PER_SENSOR,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt log at line {line}: {reason}")]
    CorruptLog { line: u64, reason: String },
    #[error("corrupt snapshot {}: {reason}", path.display())]
    CorruptSnapshot { path: PathBuf, reason: String },
    /// Early exit from a scan callback; never escapes this module.
    #[doc(hidden)]
    #[error("scan stopped")]
    Stop,
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::Io(_) | StoreError::Stop => "IO_FAILURE",
            StoreError::CorruptLog { .. } => "CORRUPT_LOG",
            StoreError::CorruptSnapshot { .. } => "CORRUPT_SNAPSHOT",
        }
    }
}
