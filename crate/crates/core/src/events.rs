//! Session event schema and sinks.
//!
//! Every event is a versioned JSON object `{v, seq, ts_ms, kind, payload}`.
//! Sequence numbers start at 1 and increase by one per event.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Outcome, SkillCall};
use crate::scene::{GoalVerdict, SimEvent};
use crate::skills::SkillStatus;

pub const EVENT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    Instruction {
        text: String,
        /// `text` or `audio`.
        source: String,
    },
    Plan {
        attempt: u32,
        steps: Vec<String>,
        raw: String,
        #[serde(default)]
        snapshot_id: Option<String>,
    },
    StepStarted {
        attempt: u32,
        index: usize,
        step: String,
    },
    SkillCall {
        attempt: u32,
        index: usize,
        call: SkillCall,
        raw: String,
    },
    SimEvent {
        attempt: u32,
        index: usize,
        event: SimEvent,
    },
    StepResult {
        attempt: u32,
        index: usize,
        status: SkillStatus,
        #[serde(default)]
        detail: Option<String>,
        /// Joint-space waypoints, one vector of radians per waypoint.
        #[serde(default)]
        trajectory: Vec<Vec<f64>>,
    },
    Verdict {
        attempt: u32,
        outcome: Outcome,
        reason: String,
        /// False when the evaluator is disabled and success is assumed.
        evaluated: bool,
        #[serde(default)]
        ground_truth: Option<GoalVerdict>,
        /// Evaluator outcome disagrees with ground truth.
        discrepancy: bool,
    },
    SpeechOut {
        text: String,
        #[serde(default)]
        audio: Option<String>,
    },
    Error {
        stage: String,
        message: String,
    },
    SceneSnapshot {
        scene: serde_json::Value,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Instruction { .. } => "instruction",
            EventBody::Plan { .. } => "plan",
            EventBody::StepStarted { .. } => "step_started",
            EventBody::SkillCall { .. } => "skill_call",
            EventBody::SimEvent { .. } => "sim_event",
            EventBody::StepResult { .. } => "step_result",
            EventBody::Verdict { .. } => "verdict",
            EventBody::SpeechOut { .. } => "speech_out",
            EventBody::Error { .. } => "error",
            EventBody::SceneSnapshot { .. } => "scene_snapshot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub v: u32,
    pub seq: u64,
    pub ts_ms: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

impl SessionEvent {
    /// Canonical one-line JSON encoding.
    pub fn to_json_line(&self) -> String {
        crate::scene::canonical_json(self).expect("events serialize")
    }
}

/// Timestamp source. `Logical` stamps `ts_ms = seq` so logs are reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    #[default]
    Logical,
    System,
}

impl Clock {
    pub fn stamp(self, seq: u64) -> u64 {
        match self {
            Clock::Logical => seq,
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        }
    }
}

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("event log io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Decode {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: expected seq {expected}, found {found}")]
    Gap { line: usize, expected: u64, found: u64 },
}

/// Receives events in emission order and returns the stamped event.
pub trait EventSink {
    fn emit(&mut self, body: EventBody) -> SessionEvent;
}

/// Assigns sequence numbers and timestamps.
#[derive(Debug, Clone, Default)]
pub struct Sequencer {
    next: u64,
    clock: Clock,
}

impl Sequencer {
    pub fn new(clock: Clock) -> Self {
        Sequencer { next: 1, clock }
    }

    /// Continues after `last_seq`.
    pub fn resume(clock: Clock, last_seq: u64) -> Self {
        Sequencer { next: last_seq + 1, clock }
    }

    pub fn stamp(&mut self, body: EventBody) -> SessionEvent {
        if self.next == 0 {
            self.next = 1;
        }
        let seq = self.next;
        self.next += 1;
        SessionEvent {
            v: EVENT_SCHEMA_VERSION,
            seq,
            ts_ms: self.clock.stamp(seq),
            body,
        }
    }
}

/// In-memory sink.
#[derive(Debug, Clone, Default)]
pub struct VecSink {
    seq: Sequencer,
    pub events: Vec<SessionEvent>,
}

impl VecSink {
    pub fn new(clock: Clock) -> Self {
        VecSink {
            seq: Sequencer::new(clock),
            events: vec![],
        }
    }
}

impl EventSink for VecSink {
    fn emit(&mut self, body: EventBody) -> SessionEvent {
        let e = self.seq.stamp(body);
        self.events.push(e.clone());
        e
    }
}

/// Append-only JSONL writer. Each line is flushed and synced before `append`
/// returns.
pub struct JsonlWriter {
    path: PathBuf,
    file: File,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self, EventLogError> {
        let io = |source| EventLogError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        Ok(JsonlWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, event: &SessionEvent) -> Result<(), EventLogError> {
        let mut line = event.to_json_line();
        line.push('\n');
        let io = |source| EventLogError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.flush().map_err(io)?;
        self.file.sync_data().map_err(io)
    }
}

/// Reads a JSONL log and checks that sequence numbers are gap-free from 1.
pub fn read_jsonl(path: &Path) -> Result<Vec<SessionEvent>, EventLogError> {
    let file = File::open(path).map_err(|source| EventLogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EventLogError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let e: SessionEvent = serde_json::from_str(&line).map_err(|source| EventLogError::Decode { line: i + 1, source })?;
        let expected = out.len() as u64 + 1;
        if e.seq != expected {
            return Err(EventLogError::Gap {
                line: i + 1,
                expected,
                found: e.seq,
            });
        }
        out.push(e);
    }
    Ok(out)
}

/// In-memory sink that also persists every event to a JSONL file. The first
/// write error is kept and later writes are skipped.
pub struct JsonlSink {
    inner: VecSink,
    writer: JsonlWriter,
    pub error: Option<EventLogError>,
}

impl JsonlSink {
    pub fn create(path: &Path, clock: Clock) -> Result<Self, EventLogError> {
        Ok(JsonlSink {
            inner: VecSink::new(clock),
            writer: JsonlWriter::create(path)?,
            error: None,
        })
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.inner.events
    }

    pub fn into_events(self) -> Result<Vec<SessionEvent>, EventLogError> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.inner.events),
        }
    }
}

impl EventSink for JsonlSink {
    fn emit(&mut self, body: EventBody) -> SessionEvent {
        let e = self.inner.emit(body);
        if self.error.is_none() {
            if let Err(err) = self.writer.append(&e) {
                self.error = Some(err);
            }
        }
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_have_stable_wire_shape() {
        let mut s = VecSink::new(Clock::Logical);
        let e = s.emit(EventBody::SpeechOut {
            text: "task complete".into(),
            audio: None,
        });
        assert_eq!(
            e.to_json_line(),
            r#"{"kind":"speech_out","payload":{"audio":null,"text":"task complete"},"seq":1,"ts_ms":1,"v":1}"#
        );
        let back: SessionEvent = serde_json::from_str(&e.to_json_line()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn jsonl_round_trip_and_gap_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let mut sink = JsonlSink::create(&path, Clock::Logical).unwrap();
        for i in 0..3 {
            sink.emit(EventBody::Error {
                stage: "test".into(),
                message: format!("m{i}"),
            });
        }
        let live = sink.into_events().unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), live);

        let gap = dir.path().join("gap.jsonl");
        let lines: Vec<String> = live.iter().map(|e| e.to_json_line()).collect();
        std::fs::write(&gap, format!("{}\n{}\n", lines[0], lines[2])).unwrap();
        assert!(matches!(read_jsonl(&gap), Err(EventLogError::Gap { expected: 2, found: 3, .. })));
    }
}
