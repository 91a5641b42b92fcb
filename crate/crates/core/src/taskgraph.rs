//! Task templates, task instances, keys, data items and the dataflow wiring
//! from which the runtime derives the DAG at execution time.

use std::fmt;
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

/// Rank of a runtime node, in `[0, P)`.
pub type Rank = u32;

/// Globally unique task identity: a template id plus an index tuple of up to
/// three integers. Unused index slots are zero. Equality and hashing are
/// structural, so a task recreated on a thief node compares equal to the
/// original.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskKey {
    pub template_id: u16,
    pub index: [i64; 3],
}

impl TaskKey {
    pub fn new(template_id: u16, index: [i64; 3]) -> Self {
        TaskKey { template_id, index }
    }

    pub fn k1(template_id: u16, a: i64) -> Self {
        Self::new(template_id, [a, 0, 0])
    }

    pub fn k2(template_id: u16, a: i64, b: i64) -> Self {
        Self::new(template_id, [a, b, 0])
    }

    pub fn k3(template_id: u16, a: i64, b: i64, c: i64) -> Self {
        Self::new(template_id, [a, b, c])
    }
}

impl fmt::Debug for TaskKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "T{}({},{},{})",
            self.template_id, self.index[0], self.index[1], self.index[2]
        )
    }
}

/// An immutable payload flowing along a DAG edge. Migration copies data items,
/// never moves references.
#[derive(Clone, Debug, PartialEq)]
pub enum DataItem {
    /// Row-major dense matrix of 64-bit floats.
    Dense { rows: u32, cols: u32, data: Vec<f64> },
    /// Placeholder for a tile that is all zeroes; wiring stays identical to
    /// the dense case and task bodies short-circuit on it.
    SparseMarker,
    /// Tree-node descriptor for the unbalanced tree search benchmark.
    UtsNode { depth: u32, path: u64 },
}

impl DataItem {
    pub fn dense(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        DataItem::Dense { rows: rows as u32, cols: cols as u32, data }
    }

    pub fn size_bytes(&self) -> usize {
        match self {
            DataItem::Dense { data, .. } => 8 * data.len(),
            DataItem::SparseMarker => 1,
            DataItem::UtsNode { .. } => 12,
        }
    }

    pub fn is_marker(&self) -> bool {
        matches!(self, DataItem::SparseMarker)
    }

    pub fn as_dense(&self) -> Option<(usize, usize, &[f64])> {
        match self {
            DataItem::Dense { rows, cols, data } => {
                Some((*rows as usize, *cols as usize, data.as_slice()))
            }
            _ => None,
        }
    }
}

/// One produced output: destination task key, input slot on that task, and
/// the data item flowing along the edge.
pub type Output = (TaskKey, usize, Arc<DataItem>);

/// Filled input slots of a task, shared with the stealable predicate.
pub type Inputs = Vec<Arc<DataItem>>;

/// Execution-site information handed to task bodies. `rank` is the node the
/// body actually runs on, which differs from the key's home node for stolen
/// tasks.
pub struct ExecCtx<'a> {
    pub rank: Rank,
    pub nodes: u32,
    results: &'a ResultSink,
}

impl<'a> ExecCtx<'a> {
    pub fn new(rank: Rank, nodes: u32, results: &'a ResultSink) -> Self {
        ExecCtx { rank, nodes, results }
    }

    /// Record a final result of the computation (e.g. a factor tile),
    /// retrievable from the harness after the run.
    pub fn record_result(&self, label: (i64, i64), item: Arc<DataItem>) {
        self.results.lock().unwrap().insert(label, item);
    }
}

/// Shared store for final outputs recorded by task bodies.
pub type ResultSink = Mutex<std::collections::HashMap<(i64, i64), Arc<DataItem>>>;

pub type BodyFn = dyn Fn(&Inputs, &TaskKey, &ExecCtx) -> Vec<Output> + Send + Sync;
pub type StealableFn = dyn Fn(&Inputs, &TaskKey) -> bool + Send + Sync;
pub type PriorityFn = dyn Fn(&TaskKey) -> i64 + Send + Sync;
pub type SuccessorCountFn = dyn Fn(&TaskKey, Rank, u32) -> u64 + Send + Sync;

/// A task "class": all tasks of a template share the body, the stealable
/// predicate and the priority function; they differ only in key and data.
pub struct TaskTemplate {
    pub template_id: u16,
    pub name: &'static str,
    pub arity_in: usize,
    pub body: Arc<BodyFn>,
    /// Same signature and same data access as the body: inputs plus key.
    pub is_stealable: Arc<StealableFn>,
    pub priority_fn: Arc<PriorityFn>,
    /// Expected number of successor activations of this task that are homed
    /// on a given rank; feeds the ready+successors starvation policy.
    pub local_successors: Arc<SuccessorCountFn>,
    pub cost_class: &'static str,
}

impl fmt::Debug for TaskTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TaskTemplate({}, arity {})", self.name, self.arity_in)
    }
}

/// Lifecycle of a task instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum TaskState {
    Waiting = 0,
    Ready = 1,
    Executing = 2,
    Done = 3,
    Migrated = 4,
}

/// Result of filling one input slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    NotReady,
    NowReady,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FillError {
    #[error("input slot {slot} of {key:?} filled twice (DAG wiring bug)")]
    DoubleFill { key: TaskKey, slot: usize },
    #[error("input slot {slot} out of range for {key:?} (arity {arity})")]
    BadSlot { key: TaskKey, slot: usize, arity: usize },
}

struct InstanceSlots {
    inputs: Vec<Option<Arc<DataItem>>>,
    deps_remaining: usize,
}

/// One vertex of the DAG. Input slots may be filled concurrently from
/// several communication/worker contexts; the transition to READY happens
/// exactly once, on the fill that brings the dependence counter to zero.
pub struct TaskInstance {
    pub key: TaskKey,
    pub priority: i64,
    slots: Mutex<InstanceSlots>,
    state: AtomicU8,
    /// Cached stealable flag, evaluated once when the task becomes READY.
    stealable: AtomicU8, // 0 = unset, 1 = false, 2 = true
}

impl TaskInstance {
    pub fn new(key: TaskKey, arity_in: usize, priority: i64) -> Self {
        TaskInstance {
            key,
            priority,
            slots: Mutex::new(InstanceSlots {
                inputs: vec![None; arity_in],
                deps_remaining: arity_in,
            }),
            state: AtomicU8::new(TaskState::Waiting as u8),
            stealable: AtomicU8::new(0),
        }
    }

    /// Build an already-READY instance from a migrated task record.
    pub fn recreated(key: TaskKey, priority: i64, inputs: Vec<Arc<DataItem>>) -> Self {
        TaskInstance {
            key,
            priority,
            slots: Mutex::new(InstanceSlots {
                inputs: inputs.into_iter().map(Some).collect(),
                deps_remaining: 0,
            }),
            state: AtomicU8::new(TaskState::Ready as u8),
            stealable: AtomicU8::new(0),
        }
    }

    pub fn state(&self) -> TaskState {
        match self.state.load(Ordering::SeqCst) {
            0 => TaskState::Waiting,
            1 => TaskState::Ready,
            2 => TaskState::Executing,
            3 => TaskState::Done,
            _ => TaskState::Migrated,
        }
    }

    pub fn set_state(&self, s: TaskState) {
        self.state.store(s as u8, Ordering::SeqCst);
    }

    /// Store `item` in `slot` and decrement the dependence counter. Returns
    /// `NowReady` iff this fill brought the counter to zero; the READY
    /// transition is taken under the slot lock so it is unique even under
    /// concurrent fills.
    pub fn fill_input(&self, slot: usize, item: Arc<DataItem>) -> Result<Activation, FillError> {
        let mut slots = self.slots.lock().unwrap();
        if slot >= slots.inputs.len() {
            return Err(FillError::BadSlot { key: self.key, slot, arity: slots.inputs.len() });
        }
        if slots.inputs[slot].is_some() {
            return Err(FillError::DoubleFill { key: self.key, slot });
        }
        slots.inputs[slot] = Some(item);
        slots.deps_remaining -= 1;
        if slots.deps_remaining == 0 {
            self.set_state(TaskState::Ready);
            Ok(Activation::NowReady)
        } else {
            Ok(Activation::NotReady)
        }
    }

    /// Snapshot the filled inputs. Panics if called before READY.
    pub fn inputs(&self) -> Inputs {
        let slots = self.slots.lock().unwrap();
        slots
            .inputs
            .iter()
            .map(|s| s.clone().expect("inputs() called with unfilled slot"))
            .collect()
    }

    pub fn cache_stealable(&self, v: bool) {
        self.stealable.store(if v { 2 } else { 1 }, Ordering::SeqCst);
    }

    pub fn cached_stealable(&self) -> bool {
        self.stealable.load(Ordering::SeqCst) == 2
    }
}

impl fmt::Debug for TaskInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TaskInstance({:?}, p={}, {:?})", self.key, self.priority, self.state())
    }
}

/// Evaluate the stealable predicate of a READY task.
pub fn evaluate_stealable(tmpl: &TaskTemplate, task: &TaskInstance) -> bool {
    (tmpl.is_stealable)(&task.inputs(), &task.key)
}

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("successor key {0:?} references unregistered template")]
    UnknownTemplate(TaskKey),
}

pub type HomeFn = dyn Fn(&TaskKey, u32) -> Rank + Send + Sync;
pub type InitialFn = dyn Fn(Rank, u32) -> Vec<Output> + Send + Sync;

/// A whole program: the registered templates, the initial activations each
/// node injects at startup, and the static home mapping of task keys.
///
/// `home_node` is a pure function of (key, P): output routing is independent
/// of where a task actually executed.
pub struct TaskGraphProgram {
    templates: Vec<Arc<TaskTemplate>>,
    pub initial_tasks: Arc<InitialFn>,
    pub home_node: Arc<HomeFn>,
}

impl TaskGraphProgram {
    pub fn new(
        templates: Vec<TaskTemplate>,
        initial_tasks: Arc<InitialFn>,
        home_node: Arc<HomeFn>,
    ) -> Self {
        let mut v: Vec<Arc<TaskTemplate>> = Vec::new();
        for t in templates {
            assert_eq!(t.template_id as usize, v.len(), "template ids must be dense from 0");
            v.push(Arc::new(t));
        }
        TaskGraphProgram { templates: v, initial_tasks, home_node }
    }

    pub fn template(&self, id: u16) -> Option<&Arc<TaskTemplate>> {
        self.templates.get(id as usize)
    }

    pub fn templates(&self) -> &[Arc<TaskTemplate>] {
        &self.templates
    }

    pub fn home(&self, key: &TaskKey, nodes: u32) -> Rank {
        (self.home_node)(key, nodes)
    }

    /// Annotate a body's output list with destination nodes.
    pub fn route_outputs(
        &self,
        outputs: Vec<Output>,
        nodes: u32,
    ) -> Result<Vec<(TaskKey, usize, Arc<DataItem>, Rank)>, RouteError> {
        outputs
            .into_iter()
            .map(|(key, slot, item)| {
                if self.template(key.template_id).is_none() {
                    return Err(RouteError::UnknownTemplate(key));
                }
                let dest = self.home(&key, nodes);
                Ok((key, slot, item, dest))
            })
            .collect()
    }
}

/// Default cyclic home mapping: flatten the index tuple with stride `t`
/// (`(a)`, `(a,b) -> a*t+b`, `(a,b,c) -> (a*t+b)*t+c`) and take it modulo P.
/// Trailing zero components are ignored so a 2-index key flattens as
/// `a*t+b`, matching its written arity.
pub fn cyclic_home(t: i64) -> Arc<HomeFn> {
    Arc::new(move |key: &TaskKey, nodes: u32| {
        let mut idx: &[i64] = &key.index;
        while let [rest @ .., 0] = idx {
            if rest.is_empty() {
                break;
            }
            idx = rest;
        }
        let flat = idx.iter().fold(0i64, |acc, &x| acc * t + x);
        (flat.rem_euclid(nodes as i64)) as Rank
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arc(v: f64) -> Arc<DataItem> {
        Arc::new(DataItem::dense(1, 1, vec![v]))
    }

    #[test]
    fn single_input_fill_is_now_ready() {
        let t = TaskInstance::new(TaskKey::k1(0, 7), 1, 0);
        assert_eq!(t.fill_input(0, arc(1.0)).unwrap(), Activation::NowReady);
        assert_eq!(t.state(), TaskState::Ready);
    }

    #[test]
    fn counter_reaches_zero_on_last_fill() {
        let t = TaskInstance::new(TaskKey::k1(0, 7), 3, 0);
        assert_eq!(t.fill_input(0, arc(1.0)).unwrap(), Activation::NotReady);
        assert_eq!(t.fill_input(1, arc(2.0)).unwrap(), Activation::NotReady);
        assert_eq!(t.fill_input(2, arc(3.0)).unwrap(), Activation::NowReady);
    }

    #[test]
    fn fill_permutation_invariance_arity3() {
        // All 6 arrival orders: exactly the third fill reports NowReady.
        let perms: [[usize; 3]; 6] =
            [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for perm in perms {
            let t = TaskInstance::new(TaskKey::k3(0, 0, 2, 1), 3, 0);
            let mut results = Vec::new();
            for slot in perm {
                results.push(t.fill_input(slot, arc(slot as f64)).unwrap());
            }
            assert_eq!(
                results,
                vec![Activation::NotReady, Activation::NotReady, Activation::NowReady],
                "order {perm:?}"
            );
        }
    }

    #[test]
    fn double_fill_and_bad_slot() {
        let t = TaskInstance::new(TaskKey::k1(0, 1), 2, 0);
        t.fill_input(0, arc(1.0)).unwrap();
        assert!(matches!(t.fill_input(0, arc(1.0)), Err(FillError::DoubleFill { slot: 0, .. })));
        assert!(matches!(t.fill_input(5, arc(1.0)), Err(FillError::BadSlot { slot: 5, .. })));
    }

    #[test]
    fn concurrent_fills_yield_one_now_ready() {
        use std::sync::atomic::AtomicUsize;
        for _ in 0..50 {
            let t = Arc::new(TaskInstance::new(TaskKey::k1(0, 1), 4, 0));
            let ready = Arc::new(AtomicUsize::new(0));
            let handles: Vec<_> = (0..4)
                .map(|slot| {
                    let t = t.clone();
                    let ready = ready.clone();
                    std::thread::spawn(move || {
                        if t.fill_input(slot, Arc::new(DataItem::SparseMarker)).unwrap()
                            == Activation::NowReady
                        {
                            ready.fetch_add(1, Ordering::SeqCst);
                        }
                    })
                })
                .collect();
            for h in handles {
                h.join().unwrap();
            }
            assert_eq!(ready.load(Ordering::SeqCst), 1);
        }
    }

    #[test]
    fn cyclic_home_matches_modular_arithmetic() {
        // key (k=1, m=3), stride 200, 4 nodes: (1*200+3) mod 4 = 3
        let home = cyclic_home(200);
        assert_eq!(home(&TaskKey::k2(0, 1, 3), 4), 3);
        // single node: everything on rank 0
        for i in 0..100 {
            assert_eq!(home(&TaskKey::k2(0, i, i * 3), 1), 0);
        }
    }

    #[test]
    fn routing_purity_repeated_calls() {
        let home = cyclic_home(17);
        let key = TaskKey::k3(1, 5, 9, 2);
        let first = home(&key, 4);
        for _ in 0..100_000 {
            assert_eq!(home(&key, 4), first);
        }
    }

    #[test]
    fn constant_predicate_is_stealable() {
        let tmpl = TaskTemplate {
            template_id: 0,
            name: "t",
            arity_in: 1,
            body: Arc::new(|_, _, _| Vec::new()),
            is_stealable: Arc::new(|_, _| true),
            priority_fn: Arc::new(|_| 0),
            local_successors: Arc::new(|_, _, _| 0),
            cost_class: "t",
        };
        let task = TaskInstance::new(TaskKey::k1(0, 0), 1, 0);
        task.fill_input(0, Arc::new(DataItem::SparseMarker)).unwrap();
        assert!(evaluate_stealable(&tmpl, &task));
    }
}
