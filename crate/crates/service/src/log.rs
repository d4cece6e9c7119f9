//! Per-session event log: one writer, any number of readers.
//!
//! An event is appended to the JSONL file (flushed and synced) and to the
//! in-memory history before the head counter moves, so a subscriber can
//! never observe an event that is not yet durable.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use tabletop_core::events::{Clock, EventBody, EventLogError, JsonlWriter, SessionEvent, Sequencer};
use tokio::sync::watch;

/// Last published sequence number and whether the log accepts more events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Head {
    pub seq: u64,
    pub closed: bool,
}

struct Inner {
    seq: Sequencer,
    events: Vec<SessionEvent>,
    writer: Option<JsonlWriter>,
    persist_error: Option<String>,
}

pub struct EventLog {
    inner: Mutex<Inner>,
    head: watch::Sender<Head>,
    path: Option<PathBuf>,
}

impl EventLog {
    /// Opens a log; with a path, every event is also persisted there.
    pub fn create(path: Option<&Path>, clock: Clock) -> Result<Self, EventLogError> {
        let writer = path.map(JsonlWriter::create).transpose()?;
        Ok(EventLog {
            inner: Mutex::new(Inner {
                seq: Sequencer::new(clock),
                events: vec![],
                writer,
                persist_error: None,
            }),
            head: watch::Sender::new(Head::default()),
            path: path.map(Path::to_path_buf),
        })
    }

    /// Stamps, persists and publishes one event. A write failure is kept
    /// and later events stay in memory only. The stored event is the decoded
    /// canonical line, so memory, file and stream agree to the last digit.
    pub fn append(&self, body: EventBody) -> SessionEvent {
        let mut inner = self.inner.lock().expect("event log poisoned");
        let stamped = inner.seq.stamp(body);
        let event: SessionEvent = serde_json::from_str(&stamped.to_json_line()).expect("canonical lines decode");
        if inner.persist_error.is_none() {
            if let Some(w) = inner.writer.as_mut() {
                if let Err(e) = w.append(&event) {
                    inner.persist_error = Some(e.to_string());
                }
            }
        }
        inner.events.push(event.clone());
        // Published under the lock so heads are observed in seq order.
        self.head.send_modify(|h| h.seq = event.seq);
        event
    }

    /// Events with `seq >= from`, in order.
    pub fn since(&self, from: u64) -> Vec<SessionEvent> {
        let inner = self.inner.lock().expect("event log poisoned");
        let skip = from.saturating_sub(1) as usize;
        inner.events.iter().skip(skip).cloned().collect()
    }

    pub fn head(&self) -> Head {
        *self.head.borrow()
    }

    pub fn subscribe(&self) -> watch::Receiver<Head> {
        self.head.subscribe()
    }

    /// Ends every live stream once it has drained the history.
    pub fn close(&self) {
        let _guard = self.inner.lock().expect("event log poisoned");
        self.head.send_modify(|h| h.closed = true);
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn persist_error(&self) -> Option<String> {
        self.inner.lock().expect("event log poisoned").persist_error.clone()
    }
}
