//! Per-node ready-task storage with two pluggable policies.
//!
//! AP keeps one node-wide structure in strict (priority, key) order. 2Q keeps
//! a priority-ordered front queue for non-stealable tasks and a FIFO back
//! queue for stealable tasks that the migration agent can detach from in one
//! bulk operation.

use std::cmp::Reverse;
use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::taskgraph::{TaskInstance, TaskKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedulerPolicy {
    Ap,
    TwoQ,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOrigin {
    LocalActivation,
    StolenArrival,
    Reschedule,
}

/// Ordering key: highest priority first, determinstic tie-break by task key.
type OrderKey = (Reverse<i64>, TaskKey);

fn order_key(t: &TaskInstance) -> OrderKey {
    (Reverse(t.priority), t.key)
}

#[derive(Default)]
struct Queues {
    /// AP: the single node-wide queue. 2Q: the non-stealable front queue.
    front: BTreeMap<OrderKey, Arc<TaskInstance>>,
    /// 2Q only: stealable back queue, FIFO.
    back: VecDeque<Arc<TaskInstance>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ReadyQueueStats {
    pub ready_count: usize,
    pub scheduled_total: u64,
    pub rescheduled_total: u64,
}

pub struct Scheduler {
    policy: SchedulerPolicy,
    queues: Mutex<Queues>,
    ready_len: AtomicUsize,
    stealable_len: AtomicUsize,
    scheduled_total: AtomicU64,
    rescheduled_total: AtomicU64,
}

impl Scheduler {
    pub fn new(policy: SchedulerPolicy) -> Self {
        Scheduler {
            policy,
            queues: Mutex::new(Queues::default()),
            ready_len: AtomicUsize::new(0),
            stealable_len: AtomicUsize::new(0),
            scheduled_total: AtomicU64::new(0),
            rescheduled_total: AtomicU64::new(0),
        }
    }

    pub fn policy(&self) -> SchedulerPolicy {
        self.policy
    }

    /// Current number of READY tasks stored.
    pub fn ready_count(&self) -> usize {
        self.ready_len.load(Ordering::SeqCst)
    }

    /// Current stealable-ready estimate (the `S` of the victim policies).
    pub fn stealable_count(&self) -> usize {
        self.stealable_len.load(Ordering::SeqCst)
    }

    pub fn stats(&self) -> ReadyQueueStats {
        ReadyQueueStats {
            ready_count: self.ready_count(),
            scheduled_total: self.scheduled_total.load(Ordering::SeqCst),
            rescheduled_total: self.rescheduled_total.load(Ordering::SeqCst),
        }
    }

    pub fn insert(&self, task: Arc<TaskInstance>, origin: InsertOrigin) {
        let stealable = task.cached_stealable();
        // counters are updated while the queue lock is held so they never
        // disagree with the queue contents observed by a concurrent pop
        let mut q = self.queues.lock().unwrap();
        match self.policy {
            SchedulerPolicy::Ap => {
                q.front.insert(order_key(&task), task);
            }
            SchedulerPolicy::TwoQ => {
                if stealable {
                    q.back.push_back(task);
                } else {
                    q.front.insert(order_key(&task), task);
                }
            }
        }
        self.ready_len.fetch_add(1, Ordering::SeqCst);
        if stealable {
            self.stealable_len.fetch_add(1, Ordering::SeqCst);
        }
        self.scheduled_total.fetch_add(1, Ordering::SeqCst);
        if origin == InsertOrigin::Reschedule {
            self.rescheduled_total.fetch_add(1, Ordering::SeqCst);
        }
    }

    /// Remove and return the highest-priority available task, together with
    /// the ready count remaining after removal (polled by the metrics
    /// collector on every successful select).
    pub fn select(&self) -> Option<(Arc<TaskInstance>, usize)> {
        let mut q = self.queues.lock().unwrap();
        let task = if let Some((&k, _)) = q.front.iter().next() {
            q.front.remove(&k)
        } else {
            q.back.pop_front()
        }?;
        let after = self.ready_len.fetch_sub(1, Ordering::SeqCst) - 1;
        if task.cached_stealable() {
            self.stealable_len.fetch_sub(1, Ordering::SeqCst);
        }
        drop(q);
        Some((task, after))
    }

    /// Best-effort removal of up to `max_n` stealable READY tasks for the
    /// migration agent; may return fewer or none, as workers compete for the
    /// same tasks.
    ///
    /// AP pops tasks one at a time (releasing the lock between pops) and
    /// re-inserts every non-stealable task it popped with origin
    /// `Reschedule`. 2Q detaches from the back queue in one bulk operation
    /// and never touches a non-stealable task.
    pub fn extract_for_steal(&self, max_n: usize) -> Vec<Arc<TaskInstance>> {
        assert!(max_n >= 1);
        match self.policy {
            SchedulerPolicy::TwoQ => {
                let mut q = self.queues.lock().unwrap();
                let n = max_n.min(q.back.len());
                // detach from the tail, opposite the workers' pop end
                let split_at = q.back.len() - n;
                let taken: Vec<_> = q.back.split_off(split_at).into();
                self.ready_len.fetch_sub(taken.len(), Ordering::SeqCst);
                self.stealable_len.fetch_sub(taken.len(), Ordering::SeqCst);
                drop(q);
                taken
            }
            SchedulerPolicy::Ap => {
                // the pop quota covers every task popped, stealable or not:
                // non-stealable tasks encountered along the way use up the
                // request's budget and get rescheduled, so a mixed queue
                // yields fewer tasks than the bound allows
                let mut stolen = Vec::new();
                let mut skipped = Vec::new();
                while stolen.len() + skipped.len() < max_n {
                    let popped = {
                        let mut q = self.queues.lock().unwrap();
                        let popped = match q.front.iter().next().map(|(&k, _)| k) {
                            Some(k) => q.front.remove(&k),
                            None => None,
                        };
                        if let Some(task) = &popped {
                            self.ready_len.fetch_sub(1, Ordering::SeqCst);
                            if task.cached_stealable() {
                                self.stealable_len.fetch_sub(1, Ordering::SeqCst);
                            }
                        }
                        popped
                    };
                    let Some(task) = popped else { break };
                    if task.cached_stealable() {
                        stolen.push(task);
                    } else {
                        skipped.push(task);
                    }
                }
                for task in skipped {
                    self.insert(task, InsertOrigin::Reschedule);
                }
                stolen
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgraph::TaskState;
    use std::collections::HashSet;

    fn ready_task(id: i64, priority: i64, stealable: bool) -> Arc<TaskInstance> {
        let t = TaskInstance::new(TaskKey::k1(0, id), 0, priority);
        t.set_state(TaskState::Ready);
        t.cache_stealable(stealable);
        Arc::new(t)
    }

    #[test]
    fn ap_priority_order() {
        let s = Scheduler::new(SchedulerPolicy::Ap);
        for (id, p) in [(0, 5), (1, 1), (2, 9)] {
            s.insert(ready_task(id, p, true), InsertOrigin::LocalActivation);
        }
        let order: Vec<i64> = std::iter::from_fn(|| s.select())
            .map(|(t, _)| t.priority)
            .collect();
        assert_eq!(order, vec![9, 5, 1]);
    }

    #[test]
    fn ap_max_priority_pair() {
        let s = Scheduler::new(SchedulerPolicy::Ap);
        s.insert(ready_task(0, 2, true), InsertOrigin::LocalActivation);
        s.insert(ready_task(1, 7, true), InsertOrigin::LocalActivation);
        assert_eq!(s.select().unwrap().0.priority, 7);
    }

    #[test]
    fn empty_select_and_extract() {
        let s = Scheduler::new(SchedulerPolicy::TwoQ);
        assert!(s.select().is_none());
        assert!(s.extract_for_steal(5).is_empty());
    }

    #[test]
    fn no_reschedule_without_extraction() {
        let s = Scheduler::new(SchedulerPolicy::Ap);
        for id in 0..1000 {
            s.insert(ready_task(id, id, id % 2 == 0), InsertOrigin::LocalActivation);
        }
        assert_eq!(s.stats().rescheduled_total, 0);
        assert_eq!(s.stats().scheduled_total, 1000);
    }

    #[test]
    fn two_q_extract_targets_back_queue_only() {
        let s = Scheduler::new(SchedulerPolicy::TwoQ);
        let mut nonstealable: HashSet<TaskKey> = HashSet::new();
        for id in 0..100 {
            let stealable = id % 2 == 0;
            if !stealable {
                nonstealable.insert(TaskKey::k1(0, id));
            }
            s.insert(ready_task(id, 0, stealable), InsertOrigin::LocalActivation);
        }
        let mut offered = HashSet::new();
        loop {
            let batch = s.extract_for_steal(7);
            if batch.is_empty() {
                break;
            }
            offered.extend(batch.iter().map(|t| t.key));
        }
        assert!(offered.is_disjoint(&nonstealable));
        assert_eq!(offered.len(), 50);
        assert_eq!(s.stats().rescheduled_total, 0);
    }

    #[test]
    fn two_q_bulk_extract_counts() {
        let s = Scheduler::new(SchedulerPolicy::TwoQ);
        for id in 0..50 {
            s.insert(ready_task(id, 0, true), InsertOrigin::LocalActivation);
        }
        let got = s.extract_for_steal(20);
        assert_eq!(got.len(), 20);
        assert_eq!(s.ready_count(), 30);
        assert_eq!(s.stealable_count(), 30);
        assert_eq!(s.stats().rescheduled_total, 0);
    }

    #[test]
    fn ap_extract_reschedules_nonstealable() {
        let s = Scheduler::new(SchedulerPolicy::Ap);
        // interleave by priority so the scan pops both kinds
        for id in 0..20 {
            s.insert(ready_task(id, 20 - id, id % 2 == 0), InsertOrigin::LocalActivation);
        }
        let got = s.extract_for_steal(10);
        // the pop quota of 10 covers ids 0..9: 5 stealable are returned and
        // the 5 non-stealable pops are rescheduled
        assert_eq!(got.len(), 5);
        assert!(got.iter().all(|t| t.cached_stealable()));
        assert_eq!(s.stats().rescheduled_total, 5);
        assert_eq!(s.ready_count(), 15);
    }

    #[test]
    fn concurrent_selectors_each_task_once() {
        let s = Arc::new(Scheduler::new(SchedulerPolicy::Ap));
        let n = 40;
        for id in 0..n {
            s.insert(ready_task(id, id, true), InsertOrigin::LocalActivation);
        }
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let s = s.clone();
                std::thread::spawn(move || {
                    let mut got = Vec::new();
                    while let Some((t, _)) = s.select() {
                        got.push(t.key);
                    }
                    got
                })
            })
            .collect();
        let mut all: Vec<TaskKey> = Vec::new();
        for h in handles {
            all.extend(h.join().unwrap());
        }
        all.sort();
        let expected: Vec<TaskKey> = (0..n).map(|id| TaskKey::k1(0, id)).collect();
        assert_eq!(all, expected);
    }

    #[test]
    fn no_task_loss_under_select_extract_stress() {
        for policy in [SchedulerPolicy::Ap, SchedulerPolicy::TwoQ] {
            let s = Arc::new(Scheduler::new(policy));
            let n: i64 = 10_000;
            for id in 0..n {
                s.insert(ready_task(id, id % 13, id % 3 != 0), InsertOrigin::LocalActivation);
            }
            let mut handles = Vec::new();
            for _ in 0..10 {
                let s = s.clone();
                handles.push(std::thread::spawn(move || {
                    let mut got = Vec::new();
                    while let Some((t, _)) = s.select() {
                        got.push(t.key);
                    }
                    got
                }));
            }
            let extractor = {
                let s = s.clone();
                std::thread::spawn(move || {
                    let mut got = Vec::new();
                    for _ in 0..200 {
                        got.extend(s.extract_for_steal(16).into_iter().map(|t| t.key));
                    }
                    got
                })
            };
            let mut all: Vec<TaskKey> = extractor.join().unwrap();
            for h in handles {
                all.extend(h.join().unwrap());
            }
            // selectors may have observed a transient empty queue while the
            // extractor held skipped tasks; drain the remainder here
            while let Some((t, _)) = s.select() {
                all.push(t.key);
            }
            all.sort();
            all.dedup();
            assert_eq!(all.len() as i64, n, "policy {policy:?}");
        }
    }
}
