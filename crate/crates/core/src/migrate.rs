//! Per-node migration agent: starvation detection, randomized victim
//! selection, steal-request handling under the victim policies and the
//! waiting-time gate, and the task migration/recreation protocol.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::events::EventKind;
use crate::runtime::{NodeRuntime, RunConfig};
use crate::taskgraph::{Rank, TaskInstance, TaskState};
use crate::transport::{Message, Payload, TaskRecord};

/// When does a node consider itself starving?
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThiefPolicy {
    /// No currently ready tasks.
    ReadyOnly,
    /// No currently ready tasks and no local successors of tasks currently
    /// in execution.
    ReadyPlusSuccessors,
}

/// Upper bound on the number of tasks one steal request may take.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VictimPolicy {
    /// At most one task per request (Chunk with size 1).
    Single,
    /// At most `chunk_size` tasks per request.
    Chunk { chunk_size: usize },
    /// At most half of the currently stealable tasks.
    Half,
}

impl VictimPolicy {
    /// The bound computed from the stealable-ready estimate `s` at request
    /// arrival; extraction is best-effort below it.
    pub fn bound(&self, s: usize) -> usize {
        match self {
            VictimPolicy::Single => 1,
            VictimPolicy::Chunk { chunk_size } => *chunk_size,
            VictimPolicy::Half => s.div_ceil(2),
        }
    }
}

/// True iff the node is starving under the given policy.
pub fn detect_starvation(policy: ThiefPolicy, ready: usize, in_exec_successors: i64) -> bool {
    match policy {
        ThiefPolicy::ReadyOnly => ready == 0,
        ThiefPolicy::ReadyPlusSuccessors => ready == 0 && in_exec_successors == 0,
    }
}

/// EWMA of observed per-task migration durations (request send to task
/// insert on the thief, divided by tasks received), with a configurable
/// prior before the first observation.
pub struct MigrationCostModel {
    ns: Mutex<f64>,
    alpha: f64,
}

impl MigrationCostModel {
    pub fn new(prior: Duration) -> Self {
        assert!(prior > Duration::ZERO);
        MigrationCostModel { ns: Mutex::new(prior.as_nanos() as f64), alpha: 0.25 }
    }

    pub fn observe(&self, per_task: Duration) {
        let mut ns = self.ns.lock().unwrap();
        *ns = self.alpha * per_task.as_nanos() as f64 + (1.0 - self.alpha) * *ns;
    }

    pub fn estimate(&self) -> Duration {
        Duration::from_nanos(*self.ns.lock().unwrap() as u64)
    }
}

/// Waiting-time gate: permit a steal only if the estimated migration cost is
/// below the estimated waiting time; no estimate yet means permit, since an
/// idle node at start-up is exactly the target scenario.
pub fn gate_permits(gate_enabled: bool, cost: Duration, wait: Option<Duration>) -> bool {
    !gate_enabled || wait.map_or(true, |w| cost < w)
}

struct Outstanding {
    request_id: u64,
    victim: Rank,
    sent_at: Instant,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StealLedgerSnapshot {
    pub requests_sent: u64,
    pub requests_granted: u64,
    pub requests_denied: u64,
    pub tasks_stolen_in: u64,
    pub tasks_stolen_out: u64,
    pub grants_given: u64,
}

/// All stealing state of one node, shared between the migration agent and
/// the communication agent.
pub struct MigrateState {
    steal_enabled: bool,
    thief_policy: ThiefPolicy,
    victim_policy: VictimPolicy,
    gate: bool,
    inbox: Mutex<VecDeque<(Rank, u64)>>,
    /// Queued plus currently-served steal requests; nonzero blocks passivity
    /// so a grant is never assembled on a node the token already cleared.
    inbox_busy: AtomicUsize,
    outstanding: Mutex<Option<Outstanding>>,
    next_request_id: AtomicU64,
    pub cost_model: MigrationCostModel,
    rng: Mutex<ChaCha8Rng>,
    requests_sent: AtomicU64,
    requests_granted: AtomicU64,
    requests_denied: AtomicU64,
    tasks_stolen_in: AtomicU64,
    tasks_stolen_out: AtomicU64,
    grants_given: AtomicU64,
}

impl MigrateState {
    pub fn new(cfg: &RunConfig, rank: Rank, _nodes: u32) -> Self {
        // per-node stream reseeded from the global seed for reproducibility
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15) ^ rank as u64);
        MigrateState {
            steal_enabled: cfg.steal,
            thief_policy: cfg.thief_policy,
            victim_policy: cfg.victim_policy,
            gate: cfg.waiting_time_gate,
            inbox: Mutex::new(VecDeque::new()),
            inbox_busy: AtomicUsize::new(0),
            outstanding: Mutex::new(None),
            next_request_id: AtomicU64::new(1),
            cost_model: MigrationCostModel::new(cfg.migration_cost_prior),
            rng: Mutex::new(rng),
            requests_sent: AtomicU64::new(0),
            requests_granted: AtomicU64::new(0),
            requests_denied: AtomicU64::new(0),
            tasks_stolen_in: AtomicU64::new(0),
            tasks_stolen_out: AtomicU64::new(0),
            grants_given: AtomicU64::new(0),
        }
    }

    pub fn enqueue_request(&self, thief: Rank, request_id: u64) {
        self.inbox_busy.fetch_add(1, Ordering::SeqCst);
        self.inbox.lock().unwrap().push_back((thief, request_id));
    }

    pub fn inbox_quiet(&self) -> bool {
        self.inbox_busy.load(Ordering::SeqCst) == 0
    }

    pub fn has_outstanding(&self) -> bool {
        self.outstanding.lock().unwrap().is_some()
    }

    pub fn ledger_snapshot(&self) -> StealLedgerSnapshot {
        StealLedgerSnapshot {
            requests_sent: self.requests_sent.load(Ordering::SeqCst),
            requests_granted: self.requests_granted.load(Ordering::SeqCst),
            requests_denied: self.requests_denied.load(Ordering::SeqCst),
            tasks_stolen_in: self.tasks_stolen_in.load(Ordering::SeqCst),
            tasks_stolen_out: self.tasks_stolen_out.load(Ordering::SeqCst),
            grants_given: self.grants_given.load(Ordering::SeqCst),
        }
    }

    /// Uniform draw over all other ranks.
    pub fn pick_victim(&self, own: Rank, nodes: u32) -> Rank {
        let raw = self.rng.lock().unwrap().gen_range(0..nodes - 1);
        if raw >= own {
            raw + 1
        } else {
            raw
        }
    }
}

/// Serve one steal request on the victim's migration agent: compute the
/// policy bound from the current stealable estimate, apply the waiting-time
/// gate, extract best-effort, and reply with a grant or a deny.
pub fn handle_steal_request(node: &NodeRuntime, thief: Rank, request_id: u64) {
    let m = &node.migrate;
    let s = node.scheduler.stealable_count();
    let bound = m.victim_policy.bound(s);
    let cost = m.cost_model.estimate();
    let wait = node.waiting_time_estimate();
    let tasks: Vec<Arc<TaskInstance>> = if !gate_permits(m.gate, cost, wait) || bound == 0 {
        Vec::new()
    } else {
        node.scheduler.extract_for_steal(bound)
    };

    if tasks.is_empty() {
        m.requests_denied.fetch_add(1, Ordering::SeqCst);
        node.events.log(EventKind::Deny { request_id, thief });
        // the thief may already have shut down after a Stop broadcast; a
        // lost deny is harmless then
        node.transport
            .send(&Message {
                src: node.rank,
                dst: thief,
                payload: Payload::StealDeny { request_id },
            })
            .ok();
        return;
    }

    let mut records = Vec::with_capacity(tasks.len());
    for t in &tasks {
        t.set_state(TaskState::Migrated);
        node.forget_migrated(&t.key);
        node.events.log(EventKind::MigratedOut { key: t.key, to: thief });
        records.push(TaskRecord { key: t.key, priority: t.priority, inputs: t.inputs() });
    }
    m.grants_given.fetch_add(1, Ordering::SeqCst);
    m.tasks_stolen_out.fetch_add(records.len() as u64, Ordering::SeqCst);
    node.events.log(EventKind::Grant {
        request_id,
        thief,
        granted: records.len(),
        bound,
        stealable_estimate: s,
        cost_estimate_ns: Some(cost.as_nanos() as u64),
        waiting_estimate_ns: wait.map(|w| w.as_nanos() as u64),
    });
    node.term.on_send_countable();
    node.transport
        .send(&Message {
            src: node.rank,
            dst: thief,
            payload: Payload::StealGrant { request_id, tasks: records },
        })
        .expect("grant send failed");
}

/// Thief side of a grant (runs on the communication agent upon delivery):
/// recreate each task with its original key and priority, all inputs filled,
/// and fold the observed migration round-trip into the cost model.
pub fn on_grant(node: &NodeRuntime, request_id: u64, tasks: Vec<TaskRecord>, from: Rank) {
    let m = &node.migrate;
    let n = tasks.len();
    // log the reply while holding the slot lock so the agent cannot log its
    // next StealSent before this GrantRecv appears in the event order
    let sent_at = {
        let mut o = m.outstanding.lock().unwrap();
        let sent_at = match o.take() {
            Some(out) if out.request_id == request_id => {
                debug_assert_eq!(out.victim, from, "grant from an unexpected rank");
                Some(out.sent_at)
            }
            other => {
                *o = other;
                None
            }
        };
        node.events.log(EventKind::GrantRecv { request_id, granted: n });
        sent_at
    };
    if n > 0 {
        m.requests_granted.fetch_add(1, Ordering::SeqCst);
        m.tasks_stolen_in.fetch_add(n as u64, Ordering::SeqCst);
        if let Some(sent_at) = sent_at {
            m.cost_model.observe(sent_at.elapsed() / n as u32);
        }
    }
    for rec in tasks {
        let task = Arc::new(TaskInstance::recreated(rec.key, rec.priority, rec.inputs));
        node.insert_stolen(task, from);
    }
}

pub fn on_deny(node: &NodeRuntime, request_id: u64) {
    let m = &node.migrate;
    let mut o = m.outstanding.lock().unwrap();
    if matches!(o.as_ref(), Some(out) if out.request_id == request_id) {
        *o = None;
    }
    // logged under the slot lock; see on_grant
    node.events.log(EventKind::DenyRecv { request_id });
}

/// Migration agent thread: serves incoming steal requests promptly and polls
/// for starvation every poll interval, keeping at most one outstanding steal
/// request. A deny simply leaves the node to retry on a later poll tick.
pub fn agent_loop(node: &Arc<NodeRuntime>) {
    let m = &node.migrate;
    while !node.is_shutdown() {
        // victim side
        loop {
            let next = m.inbox.lock().unwrap().pop_front();
            match next {
                Some((thief, request_id)) => {
                    handle_steal_request(node, thief, request_id);
                    m.inbox_busy.fetch_sub(1, Ordering::SeqCst);
                }
                None => break,
            }
        }

        // thief side
        if m.steal_enabled && node.nodes >= 2 && !m.has_outstanding() {
            let starving = detect_starvation(
                m.thief_policy,
                node.scheduler.ready_count(),
                node.in_exec_successors(),
            );
            if starving {
                let victim = m.pick_victim(node.rank, node.nodes);
                let request_id = m.next_request_id.fetch_add(1, Ordering::SeqCst);
                {
                    // claim the slot and log under the same lock so StealSent
                    // cannot interleave ahead of a pending reply event
                    let mut o = m.outstanding.lock().unwrap();
                    *o = Some(Outstanding { request_id, victim, sent_at: Instant::now() });
                    node.events.log(EventKind::StealSent { victim, request_id });
                }
                m.requests_sent.fetch_add(1, Ordering::SeqCst);
                let sent = node.transport.send(&Message {
                    src: node.rank,
                    dst: victim,
                    payload: Payload::StealRequest { thief: node.rank, request_id },
                });
                if sent.is_err() {
                    // the victim already shut down after a Stop broadcast;
                    // record a local self-deny so the request is closed out
                    *m.outstanding.lock().unwrap() = None;
                    node.events.log(EventKind::DenyRecv { request_id });
                }
            }
        }

        std::thread::sleep(node.cfg.poll_interval);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starvation_policies() {
        // ready=0, successors=5: ReadyOnly declares starvation prematurely
        assert!(detect_starvation(ThiefPolicy::ReadyOnly, 0, 5));
        assert!(!detect_starvation(ThiefPolicy::ReadyPlusSuccessors, 0, 5));
        assert!(!detect_starvation(ThiefPolicy::ReadyOnly, 3, 0));
        assert!(!detect_starvation(ThiefPolicy::ReadyPlusSuccessors, 3, 0));
        assert!(detect_starvation(ThiefPolicy::ReadyPlusSuccessors, 0, 0));
    }

    #[test]
    fn victim_policy_bounds() {
        assert_eq!(VictimPolicy::Half.bound(40), 20);
        assert_eq!(VictimPolicy::Half.bound(5), 3);
        assert_eq!(VictimPolicy::Half.bound(0), 0);
        assert_eq!(VictimPolicy::Chunk { chunk_size: 20 }.bound(40), 20);
        assert_eq!(VictimPolicy::Chunk { chunk_size: 20 }.bound(5), 20);
        assert_eq!(VictimPolicy::Single.bound(40), 1);
    }

    #[test]
    fn gate_denies_when_migration_slower_than_wait() {
        // estimate 50 ms vs waiting time 30 ms: deny regardless of S
        assert!(!gate_permits(true, Duration::from_millis(50), Some(Duration::from_millis(30))));
        assert!(gate_permits(true, Duration::from_millis(10), Some(Duration::from_millis(30))));
        // NO_ESTIMATE permits
        assert!(gate_permits(true, Duration::from_millis(50), None));
        // gate off permits everything
        assert!(gate_permits(false, Duration::from_millis(50), Some(Duration::from_millis(30))));
    }

    #[test]
    fn cost_model_ewma_hand_check() {
        let m = MigrationCostModel::new(Duration::from_millis(1));
        // grant of 4 tasks taking 8 ms end to end: per-task sample 2 ms
        m.observe(Duration::from_millis(8) / 4);
        // 0.25 * 2ms + 0.75 * 1ms = 1.25 ms
        let expect = 0.25 * 2e6 + 0.75 * 1e6;
        assert_eq!(m.estimate(), Duration::from_nanos(expect as u64));
    }

    #[test]
    fn victim_draws_are_uniform() {
        let cfg = RunConfig { seed: 42, ..Default::default() };
        let m = MigrateState::new(&cfg, 3, 8);
        let n = 100_000usize;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            counts[m.pick_victim(3, 8) as usize] += 1;
        }
        assert_eq!(counts[3], 0, "never picks self");
        let expect = n as f64 / 7.0;
        for (rank, &c) in counts.iter().enumerate() {
            if rank == 3 {
                continue;
            }
            let dev = (c as f64 - expect).abs() / expect;
            assert!(dev < 0.02, "rank {rank} frequency off by {dev:.4}");
        }
    }

    #[test]
    fn two_node_thief_targets_only_possible_victim() {
        let cfg = RunConfig { seed: 7, ..Default::default() };
        let m = MigrateState::new(&cfg, 1, 2);
        for _ in 0..100 {
            assert_eq!(m.pick_victim(1, 2), 0);
        }
    }
}
