//! Deterministic discrete-event kernel.
//!
//! Events are dequeued in `(time, seq)` lexicographic order, where `seq` is a
//! per-queue insertion counter. Every processed event is appended to a
//! [`SimTrace`], which can be exported as tab-separated text.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in seconds.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    pub fn new(seconds: f64) -> Result<Self, EngineError> {
        if seconds.is_finite() && seconds >= 0.0 {
            Ok(SimTime(seconds))
        } else {
            Err(EngineError::InvalidTime(seconds))
        }
    }

    pub fn secs(self) -> f64 {
        self.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("causality violation: event at {event} scheduled when now is {now}")]
    Causality { event: f64, now: f64 },
    #[error("invalid simulation time {0}")]
    InvalidTime(f64),
}

/// Event payloads. Ids refer to jobs, nodes and devices of the owning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EventKind {
    JobArrival { job: u64 },
    CheckpointStart { job: u64 },
    CheckpointDone { job: u64 },
    Failure { node: u64, device: Option<u64>, job: Option<u64> },
    RestoreDone { job: u64 },
    JobDone { job: u64 },
    PredictionRearm { job: u64 },
    TempStep { node: u64 },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::JobArrival { .. } => "JobArrival",
            EventKind::CheckpointStart { .. } => "CheckpointStart",
            EventKind::CheckpointDone { .. } => "CheckpointDone",
            EventKind::Failure { .. } => "Failure",
            EventKind::RestoreDone { .. } => "RestoreDone",
            EventKind::JobDone { .. } => "JobDone",
            EventKind::PredictionRearm { .. } => "PredictionRearm",
            EventKind::TempStep { .. } => "TempStep",
        }
    }

    /// Payload as a JSON object without the tag.
    pub fn payload_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("event payload serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("kind");
        }
        value.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

#[derive(Clone)]
struct Queued(Event);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .time
            .0
            .total_cmp(&self.0.time.0)
            .then_with(|| other.0.seq.cmp(&self.0.seq))
    }
}

/// Pending-event set with cancellation.
#[derive(Clone, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Queued>,
    cancelled: HashSet<u64>,
    next_seq: u64,
    now: SimTime,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Enqueue `kind` at `time`, returning its sequence number.
    pub fn schedule(&mut self, time: f64, kind: EventKind) -> Result<u64, EngineError> {
        let time = SimTime::new(time)?;
        if time < self.now {
            return Err(EngineError::Causality {
                event: time.0,
                now: self.now.0,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Queued(Event { time, seq, kind }));
        Ok(seq)
    }

    /// Cancels a pending event. Cancelling an already processed event is a no-op.
    pub fn cancel(&mut self, seq: u64) {
        self.cancelled.insert(seq);
    }

    pub fn is_empty(&mut self) -> bool {
        self.peek_time().is_none()
    }

    fn drop_cancelled_head(&mut self) {
        while let Some(head) = self.heap.peek() {
            if self.cancelled.remove(&head.0.seq) {
                self.heap.pop();
            } else {
                break;
            }
        }
    }

    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.drop_cancelled_head();
        self.heap.peek().map(|q| q.0.time)
    }

    /// Pops the next event and advances the clock to its time.
    pub fn pop(&mut self) -> Option<Event> {
        self.drop_cancelled_head();
        let event = self.heap.pop()?.0;
        self.now = event.time;
        Some(event)
    }

    fn advance_to(&mut self, time: SimTime) {
        if time > self.now {
            self.now = time;
        }
    }
}

/// Processed events in dequeue order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimTrace {
    pub events: Vec<Event>,
}

impl SimTrace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Event> {
        self.events.iter()
    }

    /// `time<TAB>seq<TAB>kind<TAB>payload-json`, one event per line.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.events {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                e.time,
                e.seq,
                e.kind.name(),
                e.kind.payload_json()
            )?;
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("trace is utf-8")
    }

    /// True when every entry follows its predecessor in `(time, seq)` order.
    pub fn is_ordered(&self) -> bool {
        self.events.windows(2).all(|w| {
            let (a, b) = (&w[0], &w[1]);
            a.time.0 < b.time.0 || (a.time.0 == b.time.0 && a.seq < b.seq)
        })
    }
}

/// Event loop: a queue plus the trace of everything it has processed.
#[derive(Clone, Default)]
pub struct Engine {
    pub queue: EventQueue,
    trace: SimTrace,
    record: bool,
}

impl Engine {
    pub fn new() -> Self {
        Engine {
            queue: EventQueue::new(),
            trace: SimTrace::default(),
            record: true,
        }
    }

    /// An engine that does not keep a trace (for bulk replica runs).
    pub fn untraced() -> Self {
        Engine {
            record: false,
            ..Self::new()
        }
    }

    pub fn now(&self) -> SimTime {
        self.queue.now()
    }

    pub fn schedule(&mut self, time: f64, kind: EventKind) -> Result<u64, EngineError> {
        self.queue.schedule(time, kind)
    }

    pub fn trace(&self) -> &SimTrace {
        &self.trace
    }

    pub fn into_trace(self) -> SimTrace {
        self.trace
    }

    /// Processes every event with `time <= horizon`, handing each to `handler`
    /// together with the queue so it can schedule follow-ups. The clock ends at
    /// `horizon` (or stays put for an infinite horizon once the queue drains).
    pub fn run_until<F, E>(&mut self, horizon: f64, mut handler: F) -> Result<(), E>
    where
        F: FnMut(&Event, &mut EventQueue) -> Result<(), E>,
    {
        while let Some(t) = self.queue.peek_time() {
            if t.0 > horizon {
                break;
            }
            let event = self.queue.pop().expect("peeked event exists");
            handler(&event, &mut self.queue)?;
            if self.record {
                self.trace.events.push(event);
            }
        }
        if horizon.is_finite() {
            self.queue.advance_to(SimTime(horizon));
        }
        Ok(())
    }
}

/// Seeded random stream, independent per `(seed, label, indices)`.
///
/// The stream id is an FNV-1a hash of the label and indices, so streams are
/// stable across platforms and independent of the order they are created in.
pub fn rng_stream(seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    for idx in indices {
        for b in idx.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}
