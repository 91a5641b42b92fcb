//! Select-time polling, interval aggregation, the workload / imbalance /
//! stealing-potential pipeline, steal statistics and CSV/JSON export.
//!
//! Per interval `b` and process `i`, the workload is
//! `w_i = mean(o_1..o_N) / max(o_1..o_N)` over the ready counts polled at
//! successful selects, the imbalance is `I = max(w) - mean(w)` and the
//! potential for work stealing is `E = I * P`.

use std::io::Write;
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::taskgraph::Rank;

/// One polled ready-count sample, taken at a successful select.
#[derive(Clone, Copy, Debug)]
pub struct Sample {
    pub t_ns: u64,
    pub ready: usize,
}

/// Collects samples on one node; appended by workers, merged post-run.
#[derive(Clone)]
pub struct SampleCollector {
    samples: Arc<Mutex<Vec<Sample>>>,
}

impl SampleCollector {
    pub fn new() -> Self {
        SampleCollector { samples: Arc::new(Mutex::new(Vec::new())) }
    }
    pub fn record(&self, t_ns: u64, ready: usize) {
        self.samples.lock().unwrap().push(Sample { t_ns, ready });
    }
    pub fn snapshot(&self) -> Vec<Sample> {
        self.samples.lock().unwrap().clone()
    }
}

impl Default for SampleCollector {
    fn default() -> Self {
        Self::new()
    }
}

/// Workload of one process in one interval, with the degenerate cases
/// (no samples, all-zero samples) mapped to zero and flagged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Workload {
    pub w: f64,
    pub flag: WorkloadFlag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum WorkloadFlag {
    Ok,
    EmptyInterval,
    AllZero,
}

/// `w = mean(o) / max(o)`; empty and all-zero sample sets are defined as
/// zero workload so a starved process genuinely contributes zero.
pub fn workload(samples: &[usize]) -> Workload {
    if samples.is_empty() {
        return Workload { w: 0.0, flag: WorkloadFlag::EmptyInterval };
    }
    let max = *samples.iter().max().unwrap();
    if max == 0 {
        return Workload { w: 0.0, flag: WorkloadFlag::AllZero };
    }
    let mean = samples.iter().sum::<usize>() as f64 / samples.len() as f64;
    Workload { w: mean / max as f64, flag: WorkloadFlag::Ok }
}

/// `I = max(w) - mean(w)`.
pub fn imbalance(workloads: &[f64]) -> f64 {
    assert!(!workloads.is_empty());
    let max = workloads.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = workloads.iter().sum::<f64>() / workloads.len() as f64;
    max - mean
}

/// `E = I * P`.
pub fn potential(imbalance: f64, nodes: u32) -> f64 {
    imbalance * nodes as f64
}

/// Aggregated statistics of one interval.
#[derive(Clone, Debug, Serialize)]
pub struct IntervalStats {
    pub b: u64,
    /// (rank, sample count, workload, flag) per process.
    pub per_rank: Vec<(Rank, usize, f64, WorkloadFlag)>,
    pub imbalance: f64,
    pub potential: f64,
}

/// Group each rank's samples into intervals of `interval_ns` and run the
/// workload → imbalance → potential pipeline on every interval that has at
/// least one sample on some rank.
pub fn interval_stats(
    per_rank_samples: &[Vec<Sample>],
    interval_ns: u64,
) -> Vec<IntervalStats> {
    assert!(interval_ns > 0);
    let nodes = per_rank_samples.len() as u32;
    let last = per_rank_samples
        .iter()
        .flat_map(|s| s.iter().map(|x| x.t_ns))
        .max();
    let Some(last) = last else { return Vec::new() };
    let n_intervals = last / interval_ns + 1;
    let mut out = Vec::new();
    for b in 0..n_intervals {
        let lo = b * interval_ns;
        let hi = lo + interval_ns;
        let mut per_rank = Vec::new();
        let mut ws = Vec::new();
        for (rank, samples) in per_rank_samples.iter().enumerate() {
            let o: Vec<usize> = samples
                .iter()
                .filter(|s| s.t_ns >= lo && s.t_ns < hi)
                .map(|s| s.ready)
                .collect();
            let wl = workload(&o);
            per_rank.push((rank as Rank, o.len(), wl.w, wl.flag));
            ws.push(wl.w);
        }
        let i = imbalance(&ws);
        out.push(IntervalStats { b, per_rank, imbalance: i, potential: potential(i, nodes) });
    }
    out
}

/// Post-run steal statistics derived from the aggregated ledgers.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct StealStats {
    pub requests_sent: u64,
    pub requests_granted: u64,
    pub tasks_stolen: u64,
    pub scheduled_total: u64,
    pub rescheduled_total: u64,
    pub steal_success_pct: f64,
    pub avg_tasks_per_successful_steal: f64,
    pub rescheduled_pct: f64,
}

pub fn steal_stats(
    requests_sent: u64,
    requests_granted: u64,
    tasks_stolen: u64,
    scheduled_total: u64,
    rescheduled_total: u64,
) -> StealStats {
    StealStats {
        requests_sent,
        requests_granted,
        tasks_stolen,
        scheduled_total,
        rescheduled_total,
        steal_success_pct: if requests_sent == 0 {
            0.0
        } else {
            100.0 * requests_granted as f64 / requests_sent as f64
        },
        avg_tasks_per_successful_steal: if requests_granted == 0 {
            0.0
        } else {
            tasks_stolen as f64 / requests_granted as f64
        },
        rescheduled_pct: if scheduled_total == 0 {
            0.0
        } else {
            100.0 * rescheduled_total as f64 / scheduled_total as f64
        },
    }
}

/// Write `intervals.csv`: one row per (interval, rank) plus the per-interval
/// imbalance and potential repeated on each row. Columns are fixed:
/// `b,rank,n_samples,w,flag,imbalance,potential`.
pub fn write_intervals_csv<W: Write>(mut w: W, stats: &[IntervalStats]) -> std::io::Result<()> {
    writeln!(w, "b,rank,n_samples,w,flag,imbalance,potential")?;
    for s in stats {
        for (rank, n, wl, flag) in &s.per_rank {
            writeln!(
                w,
                "{},{},{},{},{:?},{},{}",
                s.b, rank, n, wl, flag, s.imbalance, s.potential
            )?;
        }
    }
    Ok(())
}
