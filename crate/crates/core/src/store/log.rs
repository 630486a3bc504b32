//! Append-only NDJSON event log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};

use super::event::{EventPayload, EventRecord};
use super::state::{Change, SystemState};
use super::StoreError;

/// Outcome of reading a log file from the start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanInfo {
    /// Bytes up to and including the last complete line.
    pub valid_len: u64,
    pub next_offset: u64,
    /// Bytes of an unterminated final line, if any.
    pub torn_bytes: u64,
}

/// Read every complete event in order, calling `f` on each.
///
/// A final line without a newline is a torn write and is ignored. A
/// complete line that does not parse, or an offset out of sequence, is
/// corruption.
pub fn scan_log(
    path: &Path,
    mut f: impl FnMut(EventRecord) -> Result<(), StoreError>,
) -> Result<ScanInfo, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Ok(ScanInfo {
                valid_len: 0,
                next_offset: 0,
                torn_bytes: 0,
            })
        }
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::with_capacity(1 << 16, file);
    let mut buf = Vec::new();
    let mut info = ScanInfo {
        valid_len: 0,
        next_offset: 0,
        torn_bytes: 0,
    };
    let mut line_no = 0u64;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        if buf.last() != Some(&b'\n') {
            info.torn_bytes = n as u64;
            break;
        }
        line_no += 1;
        let ev: EventRecord =
            serde_json::from_slice(&buf[..n - 1]).map_err(|e| StoreError::CorruptLog {
                line: line_no,
                reason: e.to_string(),
            })?;
        if ev.offset != info.next_offset {
            return Err(StoreError::CorruptLog {
                line: line_no,
                reason: format!("expected offset {}, found {}", info.next_offset, ev.offset),
            });
        }
        info.next_offset += 1;
        info.valid_len += n as u64;
        f(ev)?;
    }
    Ok(info)
}

/// Writer side of the log. Events are staged in memory and made durable
/// together by [`EventLog::commit`].
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    next_offset: u64,
    committed_len: u64,
    committed_offset: u64,
    staged: Vec<u8>,
}

impl EventLog {
    /// Open for appending, feeding every existing event to `f`. A torn
    /// tail is cut off.
    pub fn open(
        path: &Path,
        f: impl FnMut(EventRecord) -> Result<(), StoreError>,
    ) -> Result<Self, StoreError> {
        let info = scan_log(path, f)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(path)?;
        if info.torn_bytes > 0 {
            ::log::warn!(
                "discarding {} bytes of torn tail in {}",
                info.torn_bytes,
                path.display()
            );
            file.set_len(info.valid_len)?;
            file.sync_all()?;
        }
        Ok(EventLog {
            path: path.to_owned(),
            file,
            next_offset: info.next_offset,
            committed_len: info.valid_len,
            committed_offset: info.next_offset,
            staged: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Offset the next staged event will receive.
    pub fn next_offset(&self) -> u64 {
        self.next_offset
    }

    /// Number of durable events.
    pub fn committed_count(&self) -> u64 {
        self.committed_offset
    }

    pub fn has_staged(&self) -> bool {
        self.next_offset != self.committed_offset
    }

    pub fn stage(&mut self, ts: DateTime<Utc>, payload: EventPayload) -> EventRecord {
        let ev = EventRecord {
            offset: self.next_offset,
            ts,
            payload,
        };
        serde_json::to_writer(&mut self.staged, &ev).expect("event serializes");
        self.staged.push(b'\n');
        self.next_offset += 1;
        ev
    }

    /// Write and fsync everything staged.
    pub fn commit(&mut self) -> Result<(), StoreError> {
        if self.staged.is_empty() {
            return Ok(());
        }
        self.file.write_all(&self.staged)?;
        self.file.sync_data()?;
        self.committed_len += self.staged.len() as u64;
        self.committed_offset = self.next_offset;
        self.staged.clear();
        Ok(())
    }

    /// Drop staged events and cut the file back to the last commit.
    pub fn rollback(&mut self) -> Result<(), StoreError> {
        self.staged.clear();
        self.next_offset = self.committed_offset;
        self.file.set_len(self.committed_len)?;
        self.file.seek(SeekFrom::End(0))?;
        self.file.sync_all()?;
        Ok(())
    }

    pub fn append(&mut self, ts: DateTime<Utc>, payload: EventPayload) -> Result<EventRecord, StoreError> {
        let ev = self.stage(ts, payload);
        match self.commit() {
            Ok(()) => Ok(ev),
            Err(e) => {
                let _ = self.rollback();
                Err(e)
            }
        }
    }
}

/// Fold the whole log into a fresh state.
pub fn replay(path: &Path) -> Result<SystemState, StoreError> {
    replay_with(path, |_, _, _| {})
}

/// Fold the whole log, calling `f` after each event.
pub fn replay_with(
    path: &Path,
    mut f: impl FnMut(&EventRecord, &[Change], &SystemState),
) -> Result<SystemState, StoreError> {
    let mut state = SystemState::new();
    scan_log(path, |ev| {
        let changes = state.apply(&ev);
        f(&ev, &changes, &state);
        Ok(())
    })?;
    Ok(state)
}

/// Fold events with offset up to and including `upto`.
pub fn replay_until(path: &Path, upto: u64) -> Result<SystemState, StoreError> {
    let mut state = SystemState::new();
    let result = scan_log(path, |ev| {
        if ev.offset > upto {
            return Err(StoreError::Stop);
        }
        state.apply(&ev);
        Ok(())
    });
    match result {
        Ok(_) | Err(StoreError::Stop) => Ok(state),
        Err(e) => Err(e),
    }
}
