//! Append-only event log with periodic snapshots.
//!
//! Record layout: 4-byte big-endian payload length, the canonical JSON of the
//! event, then the CRC32 of the payload (big-endian). A snapshot file holds
//! the state after some seq; recovery loads it and replays the log tail.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tacc_core::canonical::canonical_json;

use crate::state::{ApplyError, ControllerState, Event};

pub const LOG_FILE: &str = "events.log";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const DEFAULT_SNAPSHOT_EVERY: u64 = 10_000;

/// Largest accepted record payload.
const MAX_RECORD_BYTES: u32 = 64 << 20;

pub fn encode_record(event: &Event) -> Vec<u8> {
    let payload = canonical_json(event).expect("events serialize");
    let bytes = payload.as_bytes();
    let mut out = Vec::with_capacity(bytes.len() + 8);
    out.extend((bytes.len() as u32).to_be_bytes());
    out.extend(bytes);
    out.extend(crc32fast::hash(bytes).to_be_bytes());
    out
}

/// Where and why decoding stopped early.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corruption {
    /// Seq the bad record would have carried.
    pub seq: u64,
    /// Byte offset of the bad record; everything before it is valid.
    pub offset: u64,
    pub reason: String,
}

/// Decode records until the end or the first bad one.
pub fn decode_records(bytes: &[u8], first_seq: u64) -> (Vec<Event>, Option<Corruption>) {
    let mut events = Vec::new();
    let mut pos = 0usize;
    let mut seq = first_seq;
    while pos < bytes.len() {
        let corrupt = |reason: &str| Corruption { seq, offset: pos as u64, reason: reason.to_string() };
        let Some(len) = bytes.get(pos..pos + 4) else {
            return (events, Some(corrupt("truncated length")));
        };
        let len = u32::from_be_bytes(len.try_into().unwrap());
        if len > MAX_RECORD_BYTES {
            return (events, Some(corrupt("record length out of range")));
        }
        let end = pos + 4 + len as usize;
        let (Some(payload), Some(crc)) = (bytes.get(pos + 4..end), bytes.get(end..end + 4)) else {
            return (events, Some(corrupt("truncated record")));
        };
        if crc32fast::hash(payload) != u32::from_be_bytes(crc.try_into().unwrap()) {
            return (events, Some(corrupt("checksum mismatch")));
        }
        let event: Event = match serde_json::from_slice(payload) {
            Ok(e) => e,
            Err(e) => return (events, Some(corrupt(&format!("undecodable record: {e}")))),
        };
        if event.seq != seq {
            return (events, Some(corrupt(&format!("record carries seq {}", event.seq))));
        }
        events.push(event);
        seq += 1;
        pos = end + 4;
    }
    (events, None)
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    /// Byte length of the log covered by the snapshot.
    log_offset: u64,
    state: ControllerState,
}

/// Result of reading a data directory.
#[derive(Debug)]
pub struct Recovered {
    pub state: ControllerState,
    /// Events replayed on top of the snapshot (or the empty state).
    pub replayed: u64,
    pub corrupt: Option<Corruption>,
    /// Byte length of the valid log prefix.
    pub valid_len: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("IO_ERROR: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Apply(#[from] ApplyError),
    #[error("LOG_CORRUPT: snapshot: {0}")]
    Snapshot(String),
}

/// Fold the log in `dir` into a state. Stops at the first corrupt record
/// and reports it; the returned state is that of the valid prefix.
pub fn recover(dir: &Path, half_life_s: f64) -> Result<Recovered, LogError> {
    let snapshot = read_snapshot(dir)?;
    let bytes = match fs::read(dir.join(LOG_FILE)) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let (mut state, offset) = match snapshot {
        Some(s) if s.log_offset <= bytes.len() as u64 => (s.state, s.log_offset),
        // A snapshot past the end of the log cannot be trusted.
        _ => (ControllerState::new(half_life_s), 0),
    };
    let (events, corrupt) = decode_records(&bytes[offset as usize..], state.last_seq + 1);
    let mut valid_len = offset;
    for e in &events {
        state.apply(e)?;
        valid_len += encode_record(e).len() as u64;
    }
    if let Some(c) = &corrupt {
        debug_assert_eq!(offset + c.offset, valid_len);
    }
    let corrupt = corrupt.map(|mut c| {
        c.offset += offset;
        c
    });
    Ok(Recovered { state, replayed: events.len() as u64, corrupt, valid_len })
}

fn read_snapshot(dir: &Path) -> Result<Option<Snapshot>, LogError> {
    match fs::read(dir.join(SNAPSHOT_FILE)) {
        Ok(b) => serde_json::from_slice(&b).map(Some).map_err(|e| LogError::Snapshot(e.to_string())),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// The single writer of a data directory's log.
pub struct EventLog {
    dir: PathBuf,
    out: BufWriter<File>,
    len: u64,
    since_snapshot: u64,
    pub snapshot_every: u64,
}

impl EventLog {
    /// Open for appending after `recovered`, cutting off any corrupt tail.
    pub fn open(dir: &Path, recovered: &Recovered) -> Result<EventLog, LogError> {
        fs::create_dir_all(dir)?;
        let file = OpenOptions::new().create(true).read(true).write(true).truncate(false).open(dir.join(LOG_FILE))?;
        file.set_len(recovered.valid_len)?;
        let mut out = BufWriter::new(file);
        io::Seek::seek(&mut out, io::SeekFrom::Start(recovered.valid_len))?;
        Ok(EventLog {
            dir: dir.to_path_buf(),
            out,
            len: recovered.valid_len,
            since_snapshot: recovered.replayed,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
        })
    }

    /// Write and flush one record. `state` is the state after `event`, used
    /// when a snapshot is due.
    pub fn append(&mut self, event: &Event, state: &ControllerState) -> Result<(), LogError> {
        let record = encode_record(event);
        self.out.write_all(&record)?;
        self.out.flush()?;
        self.len += record.len() as u64;
        self.since_snapshot += 1;
        if self.since_snapshot >= self.snapshot_every {
            self.snapshot(state)?;
        }
        Ok(())
    }

    pub fn snapshot(&mut self, state: &ControllerState) -> Result<(), LogError> {
        let snap = Snapshot { seq: state.last_seq, log_offset: self.len, state: state.clone() };
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec(&snap).expect("state serializes"))?;
        fs::rename(&tmp, self.dir.join(SNAPSHOT_FILE))?;
        self.since_snapshot = 0;
        Ok(())
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Every event in a log file, for inspection and tests.
pub fn read_log(dir: &Path) -> io::Result<(Vec<Event>, Option<Corruption>)> {
    let mut bytes = Vec::new();
    match File::open(dir.join(LOG_FILE)) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes)?;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e),
    }
    Ok(decode_records(&bytes, 1))
}
