//! Line-delimited JSON event log.
//!
//! Sessions are inspected by scripts and tests, so every state change is
//! emitted as one JSON object per line. The log always keeps an in-memory
//! copy; a writer (stderr in the CLI) is optional.

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    SessionState {
        session: String,
        from: String,
        to: String,
        t_ms: u64,
    },
    Relay {
        port: u8,
        on: bool,
        state_hex: String,
        t_ms: u64,
    },
    Capture {
        session: String,
        camera: String,
        pattern: usize,
        t_ms: u64,
    },
    Upload {
        session: String,
        files: usize,
        t_ms: u64,
    },
    Scheduler {
        decision: String,
        t_ms: u64,
    },
    Failover {
        controller: String,
        from: String,
        to: String,
        t_ms: u64,
    },
}

impl Event {
    pub fn t_ms(&self) -> u64 {
        match self {
            Event::SessionState { t_ms, .. }
            | Event::Relay { t_ms, .. }
            | Event::Capture { t_ms, .. }
            | Event::Upload { t_ms, .. }
            | Event::Scheduler { t_ms, .. }
            | Event::Failover { t_ms, .. } => *t_ms,
        }
    }
}

pub struct EventLog {
    epoch: Instant,
    inner: Mutex<Inner>,
}

struct Inner {
    events: Vec<Event>,
    writer: Option<Box<dyn Write + Send>>,
}

impl EventLog {
    /// In-memory only.
    pub fn memory() -> Self {
        Self::with_writer(None)
    }

    /// Memory plus JSON lines on stderr.
    pub fn stderr() -> Self {
        Self::with_writer(Some(Box::new(std::io::stderr())))
    }

    fn with_writer(writer: Option<Box<dyn Write + Send>>) -> Self {
        Self {
            epoch: Instant::now(),
            inner: Mutex::new(Inner {
                events: Vec::new(),
                writer,
            }),
        }
    }

    /// Milliseconds since the log was created.
    pub fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    pub fn emit(&self, event: Event) {
        let mut inner = self.inner.lock().expect("event log poisoned");
        if let Some(w) = inner.writer.as_mut() {
            if let Ok(line) = serde_json::to_string(&event) {
                let _ = writeln!(w, "{line}");
            }
        }
        inner.events.push(event);
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.inner.lock().expect("event log poisoned").events.clone()
    }
}
