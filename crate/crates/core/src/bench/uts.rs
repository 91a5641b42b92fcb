//! Unbalanced Tree Search: a synthetic benchmark whose task graph is a
//! random tree discovered during execution. Every node's child set is a pure
//! function of (seed, path), so the tree shape is identical across node
//! counts, schedules, and stealing decisions.
//!
//! The root has exactly `b0` children. Each non-root node has up to `m`
//! child slots, slot `s` occupied with probability `q`. With `q < 1/m` the
//! tree is subcritical and finite almost surely; a hard cap still guards
//! against pathological seeds.
//!
//! The path of a child in slot `s` of a node with path `p` is a splitmix
//! hash of (p, s), giving each node a compact 64-bit identity with a
//! negligible collision chance at desk scale.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::bench::{mix, u01, BenchError};
use crate::taskgraph::{DataItem, Rank, TaskGraphProgram, TaskKey, TaskTemplate};

pub const UTS_NODE: u16 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UtsAffinity {
    /// Every task homed on rank 0: the imbalance driver.
    Root,
    /// Child homed where its parent executed.
    Parent,
    /// Children scattered by path hash.
    Hashed,
}

#[derive(Clone, Debug)]
pub struct UtsConfig {
    /// Root branching factor.
    pub b0: u32,
    /// Max children per non-root node.
    pub m: u32,
    /// Per-slot child probability.
    pub q: f64,
    pub seed: u64,
    pub affinity: UtsAffinity,
    /// Abort threshold on discovered nodes.
    pub node_cap: u64,
}

impl Default for UtsConfig {
    fn default() -> Self {
        // subcritical: expected non-root branching m*q = 0.95
        UtsConfig {
            b0: 64,
            m: 5,
            q: 0.19,
            seed: 1,
            affinity: UtsAffinity::Root,
            node_cap: 2_000_000,
        }
    }
}

const ROOT_PATH: u64 = 0;

/// Child path ids of the tree node with the given path; pure in (cfg, path).
pub fn children_of(cfg: &UtsConfig, depth: u32, path: u64) -> Vec<u64> {
    let mut out = Vec::new();
    if depth == 0 {
        for s in 0..cfg.b0 {
            out.push(mix(&[cfg.seed, path, s as u64, 0xC0FF]));
        }
    } else {
        for s in 0..cfg.m {
            if u01(&[cfg.seed, path, s as u64]) < cfg.q {
                out.push(mix(&[cfg.seed, path, s as u64, 0xC0FF]));
            }
        }
    }
    out
}

/// Sequential walk of the whole tree; the independent oracle for tree size.
pub fn sequential_tree_size(cfg: &UtsConfig) -> Result<u64, BenchError> {
    let mut stack = vec![(0u32, ROOT_PATH)];
    let mut count = 0u64;
    while let Some((depth, path)) = stack.pop() {
        count += 1;
        if count > cfg.node_cap {
            return Err(BenchError::TreeTooLarge(cfg.node_cap));
        }
        for child in children_of(cfg, depth, path) {
            stack.push((depth + 1, child));
        }
    }
    Ok(count)
}

fn uts_home(cfg: &UtsConfig, key: &TaskKey, nodes: u32) -> Rank {
    match cfg.affinity {
        UtsAffinity::Root => 0,
        // key.index[1] carries the home rank chosen when the child was
        // produced (the parent's execution rank)
        UtsAffinity::Parent => (key.index[1] as u32) % nodes,
        UtsAffinity::Hashed => (mix(&[cfg.seed, key.index[0] as u64, 0xA11]) % nodes as u64) as Rank,
    }
}

/// Build the UTS program. Task key layout: index = [path, home_hint, depth].
pub fn build_uts(cfg: &UtsConfig) -> Result<TaskGraphProgram, BenchError> {
    if cfg.b0 == 0 {
        return Err(BenchError::BadConfig("b0 must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.q) {
        return Err(BenchError::BadConfig("q must be in [0,1)".into()));
    }
    let cfg = Arc::new(cfg.clone());
    let discovered = Arc::new(AtomicU64::new(0));

    let body_cfg = cfg.clone();
    let body_count = discovered.clone();
    let body = move |inputs: &Vec<Arc<DataItem>>,
                     key: &TaskKey,
                     ctx: &crate::taskgraph::ExecCtx| {
        let DataItem::UtsNode { depth, path } = *inputs[0] else {
            panic!("UTS task fed a non-tree item");
        };
        let n = body_count.fetch_add(1, Ordering::Relaxed) + 1;
        assert!(n <= body_cfg.node_cap, "tree exceeded node cap {}", body_cfg.node_cap);
        let hint = match body_cfg.affinity {
            UtsAffinity::Parent => ctx.rank as i64,
            _ => key.index[1],
        };
        children_of(&body_cfg, depth, path)
            .into_iter()
            .map(|child| {
                let ckey = TaskKey::k3(UTS_NODE, child as i64, hint, depth as i64 + 1);
                let item = Arc::new(DataItem::UtsNode { depth: depth + 1, path: child });
                (ckey, 0usize, item)
            })
            .collect::<Vec<_>>()
    };

    let priority = Arc::new(|key: &TaskKey| key.index[2]); // deeper first
    let home_cfg = cfg.clone();
    let home = Arc::new(move |key: &TaskKey, nodes: u32| uts_home(&home_cfg, key, nodes));

    // successor count is unknowable before the body runs; estimate by the
    // expected branching of a non-root node
    let succ_cfg = cfg.clone();
    let local_succ = Arc::new(move |_key: &TaskKey, _rank: Rank, _nodes: u32| {
        (succ_cfg.m as f64 * succ_cfg.q).round() as u64
    });

    let templates = vec![TaskTemplate {
        template_id: UTS_NODE,
        name: "UTS",
        arity_in: 1,
        body: Arc::new(body),
        is_stealable: Arc::new(|_inputs, _key| true),
        priority_fn: priority,
        local_successors: local_succ,
        cost_class: "uts",
    }];

    let init_cfg = cfg.clone();
    let initial = Arc::new(move |rank: Rank, nodes: u32| {
        let key = TaskKey::k3(UTS_NODE, ROOT_PATH as i64, 0, 0);
        if uts_home(&init_cfg, &key, nodes) == rank {
            vec![(key, 0usize, Arc::new(DataItem::UtsNode { depth: 0, path: ROOT_PATH }))]
        } else {
            Vec::new()
        }
    });

    Ok(TaskGraphProgram::new(templates, initial, home))
}
