//! Append-only event log.
//!
//! On disk every event is one line of JSON carrying the event fields followed
//! by a `sum` field:
//!
//! ```text
//! {"seq":1,"at":"2021-03-01T14:02:11Z","kind":"CodeIssued","payload":{..},"worker_id":null,"sum":"9f86d081884c7d65"}
//! ```
//!
//! `sum` is the first 8 bytes (hex) of the SHA-256 of the line up to, but not
//! including, `,"sum":`, with a closing `}` appended. That is exactly the
//! compact JSON encoding of the event itself.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{DomainError, EventBody, StudyConfig, StudyEvent, WorkerId};
use crate::state::StudyState;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("event rejected: {0}")]
    Validation(#[from] DomainError),
    #[error("storage error: {0}")]
    Storage(#[from] std::io::Error),
    #[error("corrupt log at line {line} (byte offset {offset}): {reason}")]
    CorruptLog {
        line: usize,
        offset: u64,
        reason: String,
    },
    #[error("snapshot error: {0}")]
    Snapshot(String),
}

const SUM_PREFIX: &str = ",\"sum\":\"";
const SUM_HEX: usize = 16;

fn checksum(body: &[u8]) -> String {
    let digest = Sha256::digest(body);
    digest[..SUM_HEX / 2].iter().map(|b| format!("{b:02x}")).collect()
}

/// Encodes one event as a log line, without the trailing newline.
pub fn encode_line(event: &StudyEvent) -> String {
    let body = serde_json::to_string(event).expect("events serialize");
    let sum = checksum(body.as_bytes());
    let mut line = String::with_capacity(body.len() + SUM_PREFIX.len() + SUM_HEX + 2);
    line.push_str(&body[..body.len() - 1]);
    line.push_str(SUM_PREFIX);
    line.push_str(&sum);
    line.push_str("\"}");
    line
}

/// Decodes and verifies one log line.
pub fn decode_line(line: &str) -> Result<StudyEvent, String> {
    let tail = SUM_PREFIX.len() + SUM_HEX + 2;
    if line.len() < tail + 2 || !line.ends_with("\"}") {
        return Err("truncated record".into());
    }
    let split = line.len() - tail;
    if !line.is_char_boundary(split) || &line[split..split + SUM_PREFIX.len()] != SUM_PREFIX {
        return Err("missing checksum".into());
    }
    let sum = &line[split + SUM_PREFIX.len()..line.len() - 2];
    let mut body = String::with_capacity(split + 1);
    body.push_str(&line[..split]);
    body.push('}');
    if checksum(body.as_bytes()) != sum {
        return Err("checksum mismatch".into());
    }
    serde_json::from_str(&body).map_err(|e| format!("malformed record: {e}"))
}

/// Reads and verifies a whole log. The first bad record is reported with its
/// 1-based line number and byte offset.
pub fn read_events<R: Read>(reader: R) -> Result<Vec<StudyEvent>, PersistError> {
    read_events_from(reader, 1)
}

/// Like [`read_events`] for a log whose first record has sequence `first`.
fn read_events_from<R: Read>(reader: R, first: u64) -> Result<Vec<StudyEvent>, PersistError> {
    let mut reader = BufReader::new(reader);
    let mut events = Vec::new();
    let mut offset = 0u64;
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let corrupt = |reason: String| PersistError::CorruptLog {
            line: line_no,
            offset,
            reason,
        };
        let Some(line) = buf.strip_suffix('\n') else {
            return Err(corrupt("truncated record (no newline)".into()));
        };
        let event = decode_line(line).map_err(corrupt)?;
        let expected = first + events.len() as u64;
        if event.seq != expected {
            return Err(corrupt(format!("sequence {} where {expected} expected", event.seq)));
        }
        events.push(event);
        offset += n as u64;
    }
    Ok(events)
}

pub fn read_log_file(path: &Path) -> Result<Vec<StudyEvent>, PersistError> {
    read_events(File::open(path)?)
}

pub fn write_events<W: Write>(events: &[StudyEvent], mut out: W) -> std::io::Result<()> {
    for e in events {
        out.write_all(encode_line(e).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Durability {
    /// `fsync` each record before acknowledging it.
    Sync,
    /// Flush to the OS only.
    Flush,
}

struct FileSink {
    file: File,
    durability: Durability,
}

impl FileSink {
    fn write(&mut self, line: &str) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        self.file.write_all(&buf)?;
        self.file.flush()?;
        if self.durability == Durability::Sync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

/// The log together with the state it materializes. Every append is
/// validated against the state first, written second, applied last.
pub struct EventStore {
    config: StudyConfig,
    events: Vec<StudyEvent>,
    state: StudyState,
    sink: Option<FileSink>,
    path: Option<PathBuf>,
}

impl EventStore {
    pub fn in_memory(config: StudyConfig) -> Self {
        Self {
            config,
            events: Vec::new(),
            state: StudyState::default(),
            sink: None,
            path: None,
        }
    }

    /// Opens (or creates) a log file, replaying what it already holds.
    pub fn open(path: &Path, config: StudyConfig, durability: Durability) -> Result<Self, PersistError> {
        let events = if path.exists() {
            read_log_file(path)?
        } else {
            Vec::new()
        };
        let state = replay(&events, &config)?;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            config,
            events,
            state,
            sink: Some(FileSink { file, durability }),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn state(&self) -> &StudyState {
        &self.state
    }

    pub fn events(&self) -> &[StudyEvent] {
        &self.events
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn head(&self) -> u64 {
        self.state.last_seq
    }

    /// Appends a new event and returns its sequence number.
    pub fn append(
        &mut self,
        at: chrono::DateTime<chrono::Utc>,
        worker_id: Option<WorkerId>,
        body: EventBody,
    ) -> Result<u64, PersistError> {
        let event = StudyEvent {
            seq: self.state.last_seq + 1,
            at,
            body,
            worker_id,
        };
        self.state.check(&event, &self.config)?;
        if let Some(sink) = &mut self.sink {
            sink.write(&encode_line(&event))?;
        }
        self.state
            .apply(&event, &self.config)
            .expect("validated event applies");
        self.events.push(event);
        Ok(self.state.last_seq)
    }
}

/// Rebuilds state from scratch.
pub fn replay(events: &[StudyEvent], config: &StudyConfig) -> Result<StudyState, PersistError> {
    replay_onto(StudyState::default(), events, config)
}

/// Continues from a snapshot state with the events that follow it.
pub fn replay_onto(
    mut state: StudyState,
    events: &[StudyEvent],
    config: &StudyConfig,
) -> Result<StudyState, PersistError> {
    for e in events {
        state.apply(e, config)?;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub seq: u64,
    pub config: StudyConfig,
    pub state: StudyState,
}

impl Snapshot {
    pub fn write_to(&self, path: &Path) -> Result<(), PersistError> {
        let json = serde_json::to_vec(self).map_err(|e| PersistError::Snapshot(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self, PersistError> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| PersistError::Snapshot(e.to_string()))
    }
}

/// Splits a log into a snapshot at `keep_tail` events before the head and the
/// remaining tail, writing `snapshot.json` and `tail.ndjson` into `out_dir`.
pub fn compact(
    events: &[StudyEvent],
    config: &StudyConfig,
    keep_tail: usize,
    out_dir: &Path,
) -> Result<Snapshot, PersistError> {
    let cut = events.len().saturating_sub(keep_tail);
    let state = replay(&events[..cut], config)?;
    let snapshot = Snapshot {
        seq: state.last_seq,
        config: config.clone(),
        state,
    };
    std::fs::create_dir_all(out_dir)?;
    snapshot.write_to(&out_dir.join("snapshot.json"))?;
    let tail = File::create(out_dir.join("tail.ndjson"))?;
    write_events(&events[cut..], std::io::BufWriter::new(tail))?;
    Ok(snapshot)
}

/// Inverse of [`compact`]: loads a snapshot and replays the tail onto it.
pub fn load_compacted(dir: &Path) -> Result<(StudyConfig, StudyState), PersistError> {
    let snapshot = Snapshot::read_from(&dir.join("snapshot.json"))?;
    let tail = read_events_from(File::open(dir.join("tail.ndjson"))?, snapshot.seq + 1)?;
    let state = replay_onto(snapshot.state, &tail, &snapshot.config)?;
    Ok((snapshot.config, state))
}
