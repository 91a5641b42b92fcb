//! Run orchestration: launch a full multi-node run (all ranks as threads in
//! one process, or a single rank over sockets), merge per-node outputs,
//! audit the merged event log against the runtime's invariants, and export
//! the metrics artifacts.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::events::{Event, EventKind};
use crate::metrics::{
    self, steal_stats, IntervalStats, Sample, StealStats,
};
use crate::migrate::{gate_permits, StealLedgerSnapshot};
use crate::runtime::{waiting_time, NodeOutput, NodeRuntime, RunConfig};
use crate::scheduler::{InsertOrigin, ReadyQueueStats};
use crate::taskgraph::{DataItem, Rank, ResultSink, TaskGraphProgram, TaskKey};
use crate::transport::{InprocTransport, SocketTransport, Transport};

/// Merged outcome of a whole run.
pub struct RunOutput {
    pub per_rank: Vec<NodeOutput>,
    pub makespan_ns: u64,
}

impl RunOutput {
    pub fn nodes(&self) -> u32 {
        self.per_rank.len() as u32
    }

    /// All events of all ranks in one list.
    pub fn all_events(&self) -> Vec<&Event> {
        self.per_rank.iter().flat_map(|n| n.events.iter()).collect()
    }

    /// Executed (Done) task keys across all ranks, with multiplicity.
    pub fn done_keys(&self) -> Vec<TaskKey> {
        self.all_events()
            .into_iter()
            .filter_map(|e| match e.kind {
                EventKind::Done { key } => Some(key),
                _ => None,
            })
            .collect()
    }

    /// Results recorded by task bodies, merged over ranks.
    pub fn results(&self) -> HashMap<(i64, i64), Arc<DataItem>> {
        let mut merged = HashMap::new();
        for n in &self.per_rank {
            for (k, v) in &n.results {
                merged.insert(*k, v.clone());
            }
        }
        merged
    }

    pub fn total_ledger(&self) -> StealLedgerSnapshot {
        let mut acc = StealLedgerSnapshot::default();
        for n in &self.per_rank {
            acc.requests_sent += n.ledger.requests_sent;
            acc.requests_granted += n.ledger.requests_granted;
            acc.requests_denied += n.ledger.requests_denied;
            acc.tasks_stolen_in += n.ledger.tasks_stolen_in;
            acc.tasks_stolen_out += n.ledger.tasks_stolen_out;
            acc.grants_given += n.ledger.grants_given;
        }
        acc
    }

    pub fn total_sched_stats(&self) -> ReadyQueueStats {
        let mut acc = ReadyQueueStats::default();
        for n in &self.per_rank {
            acc.ready_count += n.sched_stats.ready_count;
            acc.scheduled_total += n.sched_stats.scheduled_total;
            acc.rescheduled_total += n.sched_stats.rescheduled_total;
        }
        acc
    }

    pub fn steal_stats(&self) -> StealStats {
        let l = self.total_ledger();
        let s = self.total_sched_stats();
        steal_stats(
            l.requests_sent,
            l.requests_granted,
            l.tasks_stolen_in,
            s.scheduled_total,
            s.rescheduled_total,
        )
    }

    pub fn interval_stats(&self, interval_ns: u64) -> Vec<IntervalStats> {
        let per_rank: Vec<Vec<Sample>> =
            self.per_rank.iter().map(|n| n.samples.clone()).collect();
        metrics::interval_stats(&per_rank, interval_ns)
    }
}

/// Run all ranks of a program as threads inside this process over the
/// in-process transport, sharing one clock and one result sink.
pub fn run_inproc(program: Arc<TaskGraphProgram>, cfg: &RunConfig) -> RunOutput {
    let clock = crate::events::RunClock::start();
    let results: Arc<ResultSink> = Arc::new(ResultSink::new(HashMap::new()));
    let mesh = InprocTransport::mesh(cfg.nodes);

    let mut handles = Vec::new();
    for transport in mesh {
        let node = NodeRuntime::new(
            program.clone(),
            cfg.clone(),
            Arc::new(transport),
            clock.clone(),
            results.clone(),
        );
        handles.push(
            std::thread::Builder::new()
                .name(format!("node-{}", node.rank))
                .spawn(move || node.run())
                .unwrap(),
        );
    }

    let mut per_rank: Vec<NodeOutput> = handles
        .into_iter()
        .map(|h| match h.join() {
            Ok(out) => out,
            Err(e) => std::panic::resume_unwind(e),
        })
        .collect();
    per_rank.sort_by_key(|n| n.rank);
    let makespan_ns = clock.now_ns();
    RunOutput { per_rank, makespan_ns }
}

/// Run a single rank of a distributed run over the socket transport.
/// Returns that rank's output only; artifact merging across processes is an
/// offline concern.
pub fn run_socket_rank(
    program: Arc<TaskGraphProgram>,
    cfg: &RunConfig,
    rank: Rank,
    addrs: Vec<String>,
) -> Result<NodeOutput, crate::transport::TransportError> {
    let transport = SocketTransport::bind(rank, addrs)?;
    let clock = crate::events::RunClock::start();
    let results: Arc<ResultSink> = Arc::new(ResultSink::new(HashMap::new()));
    let node = NodeRuntime::new(
        program,
        cfg.clone(),
        Arc::new(transport) as Arc<dyn Transport>,
        clock,
        results,
    );
    Ok(node.run())
}

/// Check the merged event log against the runtime invariants. Returns one
/// human-readable violation per breach; an empty list means the run is clean.
pub fn audit(out: &RunOutput, cfg: &RunConfig) -> Vec<String> {
    let mut violations = Vec::new();

    // --- exactly-once execution across the whole run
    let mut done_counts: HashMap<TaskKey, usize> = HashMap::new();
    for key in out.done_keys() {
        *done_counts.entry(key).or_insert(0) += 1;
    }
    for (key, n) in &done_counts {
        if *n != 1 {
            violations.push(format!("task {key:?} completed {n} times"));
        }
    }
    let done_set: HashSet<TaskKey> = done_counts.keys().copied().collect();

    // --- every first-inserted task completes somewhere, and vice versa
    let mut inserted: HashSet<TaskKey> = HashSet::new();
    for ev in out.all_events() {
        if let EventKind::Insert { key, origin } = ev.kind {
            if origin != InsertOrigin::Reschedule && origin != InsertOrigin::StolenArrival {
                inserted.insert(key);
            }
        }
    }
    for key in inserted.difference(&done_set) {
        violations.push(format!("task {key:?} was inserted but never completed"));
    }
    for key in done_set.difference(&inserted) {
        violations.push(format!("task {key:?} completed without a local-activation insert"));
    }

    // --- dataflow edges only emanate from completed tasks
    for ev in out.all_events() {
        if let EventKind::Edge { from, .. } = ev.kind {
            if !done_set.contains(&from) {
                violations.push(format!("edge from {from:?} but that task never completed"));
            }
        }
    }

    // --- per-rank structural checks
    for node in &out.per_rank {
        let rank = node.rank;

        // a task migrated out of a rank may only complete on it if it was
        // stolen back in the meantime: per key, latest MigratedOut before
        // the Done must be followed by a StolenIn
        let mut last_out: HashMap<TaskKey, usize> = HashMap::new();
        let mut last_in: HashMap<TaskKey, usize> = HashMap::new();
        let mut selects = 0usize;
        let mut outstanding = 0i64;
        for (i, ev) in node.events.iter().enumerate() {
            match ev.kind {
                EventKind::MigratedOut { key, .. } => {
                    last_out.insert(key, i);
                }
                EventKind::StolenIn { key, .. } => {
                    last_in.insert(key, i);
                }
                EventKind::Done { key } => {
                    if let Some(&out_i) = last_out.get(&key) {
                        if last_in.get(&key).is_none_or(|&in_i| in_i < out_i) {
                            violations.push(format!(
                                "rank {rank} completed {key:?} after migrating it away"
                            ));
                        }
                    }
                }
                EventKind::Select { .. } => selects += 1,
                EventKind::StealSent { .. } => {
                    outstanding += 1;
                    if outstanding > 1 {
                        violations.push(format!(
                            "rank {rank} had more than one outstanding steal request"
                        ));
                    }
                }
                EventKind::GrantRecv { .. } | EventKind::DenyRecv { .. } => {
                    outstanding -= 1;
                    if outstanding < 0 {
                        violations
                            .push(format!("rank {rank} got a steal reply it never requested"));
                    }
                }
                EventKind::Grant {
                    granted,
                    bound,
                    stealable_estimate,
                    cost_estimate_ns,
                    waiting_estimate_ns,
                    ..
                } => {
                    // victim-policy bound: granted <= bound and never more
                    // than was stealable at decision time
                    let recomputed = cfg.victim_policy.bound(stealable_estimate);
                    if bound != recomputed {
                        violations.push(format!(
                            "rank {rank} grant bound {bound} != policy bound {recomputed} \
                             for {stealable_estimate} stealable"
                        ));
                    }
                    if granted > bound {
                        violations.push(format!(
                            "rank {rank} granted {granted} tasks over bound {bound}"
                        ));
                    }
                    // gate soundness: a grant may only happen when the gate
                    // permitted it under the recorded estimates
                    if granted > 0 {
                        let cost = cost_estimate_ns
                            .map(std::time::Duration::from_nanos)
                            .unwrap_or_default();
                        let wait = waiting_estimate_ns.map(std::time::Duration::from_nanos);
                        if !gate_permits(cfg.waiting_time_gate, cost, wait) {
                            violations.push(format!(
                                "rank {rank} granted a steal the waiting-time gate forbids \
                                 (cost {cost_estimate_ns:?} ns, wait {waiting_estimate_ns:?} ns)"
                            ));
                        }
                    }
                }
                _ => {}
            }
        }
        // every successful select produced exactly one queue-length sample
        if node.samples.len() != selects {
            violations.push(format!(
                "rank {rank} recorded {} samples but {selects} selects",
                node.samples.len()
            ));
        }
        if node.sched_stats.rescheduled_total > node.sched_stats.scheduled_total {
            violations.push(format!(
                "rank {rank} rescheduled more tasks than it ever scheduled"
            ));
        }
    }

    violations
}

/// Spot-check of the waiting-time relation on the recorded grant events:
/// every permitted steal with estimates recorded must satisfy the strict
/// inequality cost < wait. (Redundant with the audit's gate check but usable
/// standalone with a custom formula recomputation.)
pub fn recompute_waiting_time(ready: usize, workers: usize, avg_ns: u64) -> u64 {
    waiting_time(ready, workers, std::time::Duration::from_nanos(avg_ns)).as_nanos() as u64
}

/// Write intervals.csv and summary.json into `dir`.
pub fn export_artifacts(
    out: &RunOutput,
    cfg: &RunConfig,
    dir: &Path,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let intervals = out.interval_stats(cfg.interval_ns);
    let csv = std::fs::File::create(dir.join("intervals.csv"))?;
    metrics::write_intervals_csv(csv, &intervals)?;

    let summary = serde_json::json!({
        "nodes": out.nodes(),
        "workers": cfg.workers,
        "makespan_ns": out.makespan_ns,
        "tasks_executed": out.done_keys().len(),
        "steal": out.steal_stats(),
        "intervals": intervals,
        "per_rank": out.per_rank.iter().map(|n| serde_json::json!({
            "rank": n.rank,
            "scheduled": n.sched_stats.scheduled_total,
            "rescheduled": n.sched_stats.rescheduled_total,
            "requests_sent": n.ledger.requests_sent,
            "requests_granted": n.ledger.requests_granted,
            "requests_denied": n.ledger.requests_denied,
            "tasks_stolen_in": n.ledger.tasks_stolen_in,
            "tasks_stolen_out": n.ledger.tasks_stolen_out,
            "grants_given": n.ledger.grants_given,
        })).collect::<Vec<_>>(),
    });
    let mut f = std::fs::File::create(dir.join("summary.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

/// Write one rank's event log as text lines.
pub fn export_events(node: &NodeOutput, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::fs::File::create(dir.join(format!("events-rank{}.log", node.rank)))?;
    for ev in &node.events {
        writeln!(f, "{}", crate::events::format_event(ev))?;
    }
    Ok(())
}
