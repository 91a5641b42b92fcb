//! Per-node event log. Every run appends structured records that post-run
//! audits and the metrics oracle consume; the CLI writes them out as
//! newline-delimited text.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::scheduler::InsertOrigin;
use crate::taskgraph::{Rank, TaskKey};

#[derive(Clone, Debug, PartialEq)]
pub enum EventKind {
    Insert { key: TaskKey, origin: InsertOrigin },
    /// Successful select; `ready_after` is the ready count polled after the
    /// selected task was removed.
    Select { key: TaskKey, ready_after: usize },
    Edge { from: TaskKey, to: TaskKey, slot: u32 },
    Done { key: TaskKey },
    MigratedOut { key: TaskKey, to: Rank },
    StolenIn { key: TaskKey, from: Rank },
    StealSent { victim: Rank, request_id: u64 },
    Grant {
        request_id: u64,
        thief: Rank,
        granted: usize,
        bound: usize,
        stealable_estimate: usize,
        cost_estimate_ns: Option<u64>,
        waiting_estimate_ns: Option<u64>,
    },
    Deny { request_id: u64, thief: Rank },
    GrantRecv { request_id: u64, granted: usize },
    DenyRecv { request_id: u64 },
    Terminated,
}

#[derive(Clone, Debug)]
pub struct Event {
    pub t_ns: u64,
    pub rank: Rank,
    pub kind: EventKind,
}

/// Run-relative clock shared by every node of an in-process run; each process
/// of a socket run gets its own origin after the start barrier.
#[derive(Clone)]
pub struct RunClock {
    origin: Instant,
}

impl RunClock {
    pub fn start() -> Self {
        RunClock { origin: Instant::now() }
    }
    pub fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }
}

#[derive(Clone)]
pub struct EventLog {
    rank: Rank,
    clock: RunClock,
    events: Arc<Mutex<Vec<Event>>>,
}

impl EventLog {
    pub fn new(rank: Rank, clock: RunClock) -> Self {
        EventLog { rank, clock, events: Arc::new(Mutex::new(Vec::new())) }
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn log(&self, kind: EventKind) {
        let ev = Event { t_ns: self.clock.now_ns(), rank: self.rank, kind };
        self.events.lock().unwrap().push(ev);
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.events.lock().unwrap().clone()
    }
}

/// Render one event as a line of the newline-delimited log file.
pub fn format_event(ev: &Event) -> String {
    format!("{}\t{}\t{:?}", ev.t_ns, ev.rank, ev.kind)
}
