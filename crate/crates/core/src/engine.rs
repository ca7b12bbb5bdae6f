//! Deterministic discrete-event core.
//!
//! Events are ordered by `(fire_at_us, seq)` where `seq` is a global
//! counter assigned at scheduling time, so events due at the same
//! microsecond are delivered in the order they were scheduled.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;

use thiserror::Error;

/// Simulation time in microseconds.
pub type Micros = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageId {
    App,
    FsCache,
    Scheduler,
    DiskCache,
    Disk,
}

impl StageId {
    /// Request path order; completions travel it in reverse.
    pub const PIPELINE: [StageId; 5] = [
        StageId::App,
        StageId::FsCache,
        StageId::Scheduler,
        StageId::DiskCache,
        StageId::Disk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::App => "APP",
            StageId::FsCache => "FS_CACHE",
            StageId::Scheduler => "SCHEDULER",
            StageId::DiskCache => "DISK_CACHE",
            StageId::Disk => "DISK",
        }
    }

    /// Next stage on the request path.
    pub fn below(self) -> Option<StageId> {
        let i = Self::PIPELINE.iter().position(|s| *s == self)?;
        Self::PIPELINE.get(i + 1).copied()
    }

    /// Next stage on the completion path.
    pub fn above(self) -> Option<StageId> {
        let i = Self::PIPELINE.iter().position(|s| *s == self)?;
        i.checked_sub(1).map(|j| Self::PIPELINE[j])
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Messages carried by events describe themselves for the event log.
pub trait Payload {
    fn kind(&self) -> &'static str;
    fn detail(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct SimEvent<M> {
    pub fire_at_us: Micros,
    pub seq: u64,
    pub target: StageId,
    pub payload: M,
}

struct Queued<M>(SimEvent<M>);

impl<M> PartialEq for Queued<M> {
    fn eq(&self, other: &Self) -> bool {
        self.0.seq == other.0.seq
    }
}

impl<M> Eq for Queued<M> {}

impl<M> PartialOrd for Queued<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<M> Ord for Queued<M> {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, seq)
        (other.0.fire_at_us, other.0.seq).cmp(&(self.0.fire_at_us, self.0.seq))
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("event for t={at} scheduled in the past (now {now})")]
    PastEvent { at: Micros, now: Micros },
    #[error("stage {0} is not registered")]
    UnregisteredStage(StageId),
    #[error("stage {stage} failed at t={time} handling {kind} [{detail}]: {source}")]
    StageFault {
        time: Micros,
        stage: StageId,
        kind: &'static str,
        detail: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

/// The set of stages events may target.
#[derive(Debug, Clone, Default)]
pub struct StageTopology {
    stages: BTreeSet<StageId>,
}

impl StageTopology {
    /// All five storage-stack stages.
    pub fn storage_stack() -> Self {
        Self { stages: StageId::PIPELINE.into_iter().collect() }
    }

    pub fn register(&mut self, stage: StageId) {
        self.stages.insert(stage);
    }

    pub fn contains(&self, stage: StageId) -> bool {
        self.stages.contains(&stage)
    }
}

/// Pending events plus the simulation clock.
pub struct EventQueue<M> {
    heap: BinaryHeap<Queued<M>>,
    now: Micros,
    next_seq: u64,
    topology: StageTopology,
}

impl<M> EventQueue<M> {
    pub fn new(topology: StageTopology) -> Self {
        Self { heap: BinaryHeap::new(), now: 0, next_seq: 0, topology }
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Enqueues `payload` for `target` at `fire_at_us` and returns its
    /// sequence number.
    pub fn schedule(&mut self, fire_at_us: Micros, target: StageId, payload: M) -> Result<u64, EngineError> {
        if fire_at_us < self.now {
            return Err(EngineError::PastEvent { at: fire_at_us, now: self.now });
        }
        if !self.topology.contains(target) {
            return Err(EngineError::UnregisteredStage(target));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Queued(SimEvent { fire_at_us, seq, target, payload }));
        Ok(seq)
    }

    /// Schedules `delay` microseconds from now.
    pub fn schedule_in(&mut self, delay: Micros, target: StageId, payload: M) -> Result<u64, EngineError> {
        self.schedule(self.now + delay, target, payload)
    }

    fn peek_time(&self) -> Option<Micros> {
        self.heap.peek().map(|q| q.0.fire_at_us)
    }

    fn pop(&mut self) -> Option<SimEvent<M>> {
        let ev = self.heap.pop()?.0;
        debug_assert!(ev.fire_at_us >= self.now);
        self.now = ev.fire_at_us;
        Some(ev)
    }
}

/// Receives dispatched events.
pub trait Handler<M> {
    type Error: std::error::Error + Send + Sync + 'static;

    fn handle(&mut self, event: SimEvent<M>, queue: &mut EventQueue<M>) -> Result<(), Self::Error>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub time_us: Micros,
    pub stage: StageId,
    pub kind: &'static str,
    pub detail: String,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}", self.time_us, self.stage, self.kind, self.detail)
    }
}

pub const EVENT_LOG_VERSION: u32 = 1;

/// Ordered record of every dispatched event.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    pub entries: Vec<LogEntry>,
}

impl EventLog {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# iosim-events v{EVENT_LOG_VERSION}\n");
        for e in &self.entries {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }
}

pub struct Engine<M> {
    pub queue: EventQueue<M>,
    log: EventLog,
}

impl<M: Payload> Engine<M> {
    pub fn new(topology: StageTopology) -> Self {
        Self { queue: EventQueue::new(topology), log: EventLog::default() }
    }

    pub fn now(&self) -> Micros {
        self.queue.now()
    }

    pub fn schedule(&mut self, fire_at_us: Micros, target: StageId, payload: M) -> Result<u64, EngineError> {
        self.queue.schedule(fire_at_us, target, payload)
    }

    /// Dispatches events in order until the queue is empty or the next event
    /// lies beyond `until_us`.
    pub fn run<H: Handler<M>>(&mut self, handler: &mut H, until_us: Option<Micros>) -> Result<&EventLog, EngineError> {
        while let Some(t) = self.queue.peek_time() {
            if until_us.is_some_and(|u| t > u) {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            let entry = LogEntry {
                time_us: ev.fire_at_us,
                stage: ev.target,
                kind: ev.payload.kind(),
                detail: ev.payload.detail(),
            };
            let (time, stage, kind) = (entry.time_us, entry.stage, entry.kind);
            self.log.entries.push(entry);
            if let Err(e) = handler.handle(ev, &mut self.queue) {
                let detail = self.log.entries.last().map(|e| e.detail.clone()).unwrap_or_default();
                return Err(EngineError::StageFault { time, stage, kind, detail, source: Box::new(e) });
            }
        }
        Ok(&self.log)
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }
}
