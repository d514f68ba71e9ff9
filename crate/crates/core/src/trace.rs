//! Event trace shared by transports, engines and protocols.
//!
//! Recording takes a lock, so the sequence numbers and wall timestamps of a
//! trace are both monotone and agree with each other. Tests use the trace to
//! check ordering claims (imm after payload, no writes after a cancellation
//! confirmation, barrier before buffer reuse); the bench exports it as JSON
//! lines.

use std::io::{self, Write};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::vclock::Nanos;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostPhase {
    /// First work request of a newly submitted transfer.
    New,
    /// Remaining work requests of a transfer already in flight.
    Pending,
    /// Trailing immediate-only write of a multi-request transfer.
    Fence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceKind {
    Post {
        from: String,
        to: String,
        transfer: u64,
        wr: u64,
        len: u64,
        imm: Option<u32>,
        phase: PostPhase,
    },
    /// A payload (or fragment of one) landed in registered memory.
    WriteApplied {
        at: String,
        from: String,
        addr: u64,
        len: u64,
    },
    ImmDelivered {
        at: String,
        from: String,
        imm: u32,
    },
    MsgDelivered {
        at: String,
        from: String,
        len: u64,
    },
    DeliveryError {
        at: String,
        from: String,
        reason: String,
    },
    /// Worker loop bookkeeping: how many new / pending requests a loop
    /// iteration posted.
    Loop {
        engine: String,
        group: usize,
        new: usize,
        pending: usize,
    },
    /// Protocol-level marker.
    Mark {
        node: String,
        label: String,
        value: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub t_ns: u64,
    pub vt: Nanos,
    #[serde(flatten)]
    pub kind: TraceKind,
}

pub struct Trace {
    start: Instant,
    events: Mutex<Vec<TraceEvent>>,
}

impl std::fmt::Debug for Trace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trace").field("events", &self.len()).finish()
    }
}

impl Default for Trace {
    fn default() -> Self {
        Self::new()
    }
}

impl Trace {
    pub fn new() -> Self {
        Self { start: Instant::now(), events: Mutex::new(Vec::new()) }
    }

    pub fn record(&self, vt: Nanos, kind: TraceKind) {
        let mut ev = self.events.lock().unwrap();
        let seq = ev.len() as u64;
        let t_ns = self.start.elapsed().as_nanos() as u64;
        ev.push(TraceEvent { seq, t_ns, vt, kind });
    }

    pub fn mark(&self, node: impl Into<String>, label: impl Into<String>, value: u64) {
        self.record(crate::vclock::now(), TraceKind::Mark { node: node.into(), label: label.into(), value });
    }

    pub fn snapshot(&self) -> Vec<TraceEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.events.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.events.lock().unwrap().clear();
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        for ev in self.events.lock().unwrap().iter() {
            serde_json::to_writer(&mut out, ev)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_lines_parse_back_with_monotone_time() {
        let t = Trace::new();
        t.mark("a", "x", 1);
        t.record(5, TraceKind::ImmDelivered { at: "a".into(), from: "b".into(), imm: 3 });
        let mut out = Vec::new();
        t.write_jsonl(&mut out).unwrap();
        let evs: Vec<TraceEvent> = String::from_utf8(out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(evs.len(), 2);
        assert!(evs[0].t_ns <= evs[1].t_ns);
        assert_eq!(evs[1].kind, TraceKind::ImmDelivered { at: "a".into(), from: "b".into(), imm: 3 });
    }
}
