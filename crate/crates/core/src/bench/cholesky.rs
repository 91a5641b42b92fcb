//! Right-looking tiled Cholesky factorization on a half-sparse matrix.
//!
//! The matrix is built as `A = L0 * L0^T` where `L0` is lower triangular with
//! a row-wise sparse tile pattern: every off-diagonal tile of a "sparse row"
//! is a zero tile, diagonal tiles are always dense. That pattern is closed
//! under the factorization updates, so zero tiles stay zero, carry a 1-byte
//! marker through the DAG, and the task bodies operating on them short-circuit
//! without changing the dense numerics. The unique Cholesky factor of such a
//! matrix is `L0` itself, which the run must reproduce tile by tile.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;

use crate::bench::{u01, BenchError};
use crate::taskgraph::{
    DataItem, Rank, TaskGraphProgram, TaskKey, TaskTemplate,
};

pub const POTRF: u16 = 0;
pub const TRSM: u16 = 1;
pub const SYRK: u16 = 2;
pub const GEMM: u16 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distribution {
    /// Tiles cyclically distributed over ranks by flattened tile index.
    Cyclic,
    /// Tasks writing dense tiles all homed on one rank; sparse-tile tasks
    /// stay cyclic. The controlled-imbalance driver.
    Skewed(Rank),
}

#[derive(Clone, Debug)]
pub struct CholeskyConfig {
    /// Tiles per dimension.
    pub tiles: usize,
    /// Elements per tile dimension.
    pub tile: usize,
    /// Fraction of lower-triangle tiles that are dense.
    pub density: f64,
    pub distribution: Distribution,
    pub seed: u64,
}

impl Default for CholeskyConfig {
    fn default() -> Self {
        CholeskyConfig {
            tiles: 8,
            tile: 16,
            density: 0.5,
            distribution: Distribution::Cyclic,
            seed: 1,
        }
    }
}

/// Deterministic exact-count sparse-row selection. Rows are taken greedily
/// from the bottom up; the subset sums of {1..T-1} cover every target
/// exactly, so the dense-tile count hits round(total * density) whenever the
/// target is reachable with a dense diagonal.
pub fn sparse_rows(cfg: &CholeskyConfig) -> HashSet<usize> {
    let t = cfg.tiles;
    let total = t * (t + 1) / 2;
    let dense_target = (total as f64 * cfg.density).round() as usize;
    let mut sparse_target = total.saturating_sub(dense_target);
    let max_off_diag = t * (t - 1) / 2;
    sparse_target = sparse_target.min(max_off_diag);
    let mut rows = HashSet::new();
    for row in (1..t).rev() {
        if row <= sparse_target {
            rows.insert(row);
            sparse_target -= row;
        }
        if sparse_target == 0 {
            break;
        }
    }
    rows
}

/// Is tile (row, col) of the lower triangle sparse?
pub fn is_sparse(cfg: &CholeskyConfig, row: usize, col: usize) -> bool {
    row != col && sparse_rows(cfg).contains(&row)
}

/// Entry (i, j) of the generator tile L0[m][n]; zero above the in-tile
/// diagonal of diagonal tiles and for sparse tiles.
fn l0_entry(cfg: &CholeskyConfig, m: usize, n: usize, i: usize, j: usize) -> f64 {
    let b = cfg.tile;
    if m == n {
        if j > i {
            0.0
        } else if i == j {
            1.0 + u01(&[cfg.seed, m as u64, n as u64, i as u64, j as u64])
        } else {
            (u01(&[cfg.seed, m as u64, n as u64, i as u64, j as u64]) - 0.5) * 0.1
        }
    } else {
        let scale = 0.5 / ((cfg.tiles * b) as f64).sqrt();
        (u01(&[cfg.seed, m as u64, n as u64, i as u64, j as u64]) - 0.5) * scale
    }
}

/// The generator factor tile L0[m][n] (m >= n); None if it is sparse.
pub fn l0_tile(cfg: &CholeskyConfig, m: usize, n: usize) -> Option<Vec<f64>> {
    if is_sparse(cfg, m, n) {
        return None;
    }
    let b = cfg.tile;
    let mut data = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            data[i * b + j] = l0_entry(cfg, m, n, i, j);
        }
    }
    Some(data)
}

/// Input matrix tile A[m][n] = sum_{j<=n} L0[m][j] * L0[n][j]^T (m >= n);
/// None where the sparse pattern makes it identically zero.
pub fn a_tile(cfg: &CholeskyConfig, m: usize, n: usize) -> Option<Vec<f64>> {
    if is_sparse(cfg, m, n) {
        return None;
    }
    let b = cfg.tile;
    let mut acc = vec![0.0; b * b];
    for j in 0..=n {
        let (Some(lm), Some(ln)) = (l0_tile(cfg, m, j), l0_tile(cfg, n, j)) else {
            continue;
        };
        for i in 0..b {
            for c in 0..b {
                let mut s = 0.0;
                for t in 0..b {
                    s += lm[i * b + t] * ln[c * b + t];
                }
                acc[i * b + c] += s;
            }
        }
    }
    Some(acc)
}

// ---------------------------------------------------------------------------
// dense kernels (straightforward triple loops; fixed accumulation order keeps
// factors bitwise identical across any schedule)

/// In-tile Cholesky: lower factor of a dense SPD tile, upper part zeroed.
pub fn potrf_kernel(b: usize, a: &[f64]) -> Vec<f64> {
    let mut l = vec![0.0; b * b];
    for j in 0..b {
        let mut d = a[j * b + j];
        for t in 0..j {
            d -= l[j * b + t] * l[j * b + t];
        }
        assert!(d > 0.0, "tile not positive definite");
        let diag = d.sqrt();
        l[j * b + j] = diag;
        for i in j + 1..b {
            let mut s = a[i * b + j];
            for t in 0..j {
                s -= l[i * b + t] * l[j * b + t];
            }
            l[i * b + j] = s / diag;
        }
    }
    l
}

/// Solve X * Lkk^T = A for X.
pub fn trsm_kernel(b: usize, l_kk: &[f64], a: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let mut s = a[i * b + j];
            for t in 0..j {
                s -= x[i * b + t] * l_kk[j * b + t];
            }
            x[i * b + j] = s / l_kk[j * b + j];
        }
    }
    x
}

/// C = A - L * L^T.
pub fn syrk_kernel(b: usize, l: &[f64], a: &[f64]) -> Vec<f64> {
    let mut c = a.to_vec();
    for i in 0..b {
        for j in 0..b {
            let mut s = 0.0;
            for t in 0..b {
                s += l[i * b + t] * l[j * b + t];
            }
            c[i * b + j] -= s;
        }
    }
    c
}

/// C = A - Lm * Ln^T.
pub fn gemm_kernel(b: usize, lm: &[f64], ln: &[f64], a: &[f64]) -> Vec<f64> {
    let mut c = a.to_vec();
    for i in 0..b {
        for j in 0..b {
            let mut s = 0.0;
            for t in 0..b {
                s += lm[i * b + t] * ln[j * b + t];
            }
            c[i * b + j] -= s;
        }
    }
    c
}

// ---------------------------------------------------------------------------
// DAG wiring

/// Static successor keys of a task, a pure function of (key, T).
pub fn successors(key: &TaskKey, tiles: usize) -> Vec<(TaskKey, usize)> {
    let t = tiles as i64;
    let [k, m, n] = key.index;
    let mut out = Vec::new();
    match key.template_id {
        POTRF => {
            for mm in k + 1..t {
                out.push((TaskKey::k2(TRSM, k, mm), 0));
            }
        }
        TRSM => {
            out.push((TaskKey::k2(SYRK, k, m), 0));
            for nn in k + 1..m {
                out.push((TaskKey::k3(GEMM, k, m, nn), 0));
            }
            for mm in m + 1..t {
                out.push((TaskKey::k3(GEMM, k, mm, m), 1));
            }
        }
        SYRK => {
            if m == k + 1 {
                out.push((TaskKey::k1(POTRF, m), 0));
            } else {
                out.push((TaskKey::k2(SYRK, k + 1, m), 1));
            }
        }
        GEMM => {
            if n == k + 1 {
                out.push((TaskKey::k2(TRSM, n, m), 1));
            } else {
                out.push((TaskKey::k3(GEMM, k + 1, m, n), 2));
            }
        }
        _ => unreachable!("unknown cholesky template"),
    }
    out
}

/// The lower-triangle tile a task writes; drives both the home mapping and
/// the sparse short-circuit.
pub fn written_tile(key: &TaskKey) -> (usize, usize) {
    let [k, m, n] = key.index;
    match key.template_id {
        POTRF => (k as usize, k as usize),
        TRSM => (m as usize, k as usize),
        SYRK => (m as usize, m as usize),
        GEMM => (m as usize, n as usize),
        _ => unreachable!(),
    }
}

fn home_of(cfg: &CholeskyConfig, key: &TaskKey, nodes: u32) -> Rank {
    let (row, col) = written_tile(key);
    let cyclic = ((row * cfg.tiles + col) % nodes as usize) as Rank;
    match cfg.distribution {
        Distribution::Cyclic => cyclic,
        Distribution::Skewed(rank) => {
            if is_sparse(cfg, row, col) {
                cyclic
            } else {
                rank % nodes
            }
        }
    }
}

/// First consumer of input tile (m, n) and the slot it fills there.
fn first_consumer(m: usize, n: usize) -> (TaskKey, usize) {
    if m == n {
        if m == 0 {
            (TaskKey::k1(POTRF, 0), 0)
        } else {
            (TaskKey::k2(SYRK, 0, m as i64), 1)
        }
    } else if n == 0 {
        (TaskKey::k2(TRSM, 0, m as i64), 1)
    } else {
        (TaskKey::k3(GEMM, 0, m as i64, n as i64), 2)
    }
}

fn tile_item(cfg: &CholeskyConfig, m: usize, n: usize) -> Arc<DataItem> {
    match a_tile(cfg, m, n) {
        Some(data) => Arc::new(DataItem::dense(cfg.tile, cfg.tile, data)),
        None => Arc::new(DataItem::SparseMarker),
    }
}

/// Reference dense factorization of the assembled matrix; the build-time
/// sanity check behind NOT_SPD.
fn spd_sanity_check(cfg: &CholeskyConfig) -> Result<(), BenchError> {
    let n = cfg.tiles * cfg.tile;
    if n > 256 {
        return Ok(()); // too big for the desk-scale direct check
    }
    let b = cfg.tile;
    let mut a = vec![0.0; n * n];
    for m in 0..cfg.tiles {
        for c in 0..=m {
            if let Some(tile) = a_tile(cfg, m, c) {
                for i in 0..b {
                    for j in 0..b {
                        a[(m * b + i) * n + c * b + j] = tile[i * b + j];
                        a[(c * b + j) * n + m * b + i] = tile[i * b + j];
                    }
                }
            }
        }
    }
    // direct scalar Cholesky
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for t in 0..j {
            d -= l[j * n + t] * l[j * n + t];
        }
        if d <= 0.0 {
            return Err(BenchError::NotSpd);
        }
        l[j * n + j] = d.sqrt();
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for t in 0..j {
                s -= l[i * n + t] * l[j * n + t];
            }
            l[i * n + j] = s / l[j * n + j];
        }
    }
    Ok(())
}

/// Build the full task-graph program for a config.
pub fn build_cholesky(cfg: &CholeskyConfig) -> Result<TaskGraphProgram, BenchError> {
    if cfg.tiles == 0 || cfg.tile == 0 {
        return Err(BenchError::BadConfig("tiles and tile must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.density) {
        return Err(BenchError::BadConfig("density must be in [0,1]".into()));
    }
    spd_sanity_check(cfg)?;

    let tiles = cfg.tiles;
    let b = cfg.tile;
    let cfg = Arc::new(cfg.clone());

    // outputs of a body: wire each produced tile to the static successors
    let fanout = move |key: &TaskKey, item: Arc<DataItem>, which: &dyn Fn(usize) -> bool| {
        successors(key, tiles)
            .into_iter()
            .enumerate()
            .filter(|(i, _)| which(*i))
            .map(|(_, (skey, slot))| (skey, slot, item.clone()))
            .collect::<Vec<_>>()
    };

    let all = |_: usize| true;

    let mk_priority = Arc::new(|key: &TaskKey| -key.index[0]);
    let home_cfg = cfg.clone();
    let home = Arc::new(move |key: &TaskKey, nodes: u32| home_of(&home_cfg, key, nodes));
    let succ_cfg = cfg.clone();
    let local_succ = Arc::new(move |key: &TaskKey, rank: Rank, nodes: u32| {
        successors(key, succ_cfg.tiles)
            .iter()
            .filter(|(skey, _)| home_of(&succ_cfg, skey, nodes) == rank)
            .count() as u64
    });

    // stealable iff the body does real computation: no marker input
    let stealable = Arc::new(|inputs: &Vec<Arc<DataItem>>, _key: &TaskKey| {
        inputs.iter().all(|i| !i.is_marker())
    });

    let potrf_body = {
        let fanout = fanout.clone();
        move |inputs: &Vec<Arc<DataItem>>, key: &TaskKey, ctx: &crate::taskgraph::ExecCtx| {
            let (_, _, a) = inputs[0].as_dense().expect("POTRF on marker tile");
            let l = Arc::new(DataItem::dense(b, b, potrf_kernel(b, a)));
            let (row, col) = written_tile(key);
            ctx.record_result((row as i64, col as i64), l.clone());
            fanout(key, l, &all)
        }
    };

    let trsm_body = {
        let fanout = fanout.clone();
        move |inputs: &Vec<Arc<DataItem>>, key: &TaskKey, ctx: &crate::taskgraph::ExecCtx| {
            let out = if inputs[1].is_marker() {
                Arc::new(DataItem::SparseMarker)
            } else {
                let (_, _, l_kk) = inputs[0].as_dense().unwrap();
                let (_, _, a_mk) = inputs[1].as_dense().unwrap();
                let l = Arc::new(DataItem::dense(b, b, trsm_kernel(b, l_kk, a_mk)));
                let (row, col) = written_tile(key);
                ctx.record_result((row as i64, col as i64), l.clone());
                l
            };
            fanout(key, out, &all)
        }
    };

    let syrk_body = {
        let fanout = fanout.clone();
        move |inputs: &Vec<Arc<DataItem>>, key: &TaskKey, _ctx: &crate::taskgraph::ExecCtx| {
            let out = if inputs[0].is_marker() {
                inputs[1].clone() // zero update, tile passes through unchanged
            } else {
                let (_, _, l_mk) = inputs[0].as_dense().unwrap();
                let (_, _, a_mm) = inputs[1].as_dense().unwrap();
                Arc::new(DataItem::dense(b, b, syrk_kernel(b, l_mk, a_mm)))
            };
            fanout(key, out, &all)
        }
    };

    let gemm_body = {
        let fanout = fanout.clone();
        move |inputs: &Vec<Arc<DataItem>>, key: &TaskKey, _ctx: &crate::taskgraph::ExecCtx| {
            let out = if inputs[2].is_marker() {
                Arc::new(DataItem::SparseMarker)
            } else if inputs[0].is_marker() || inputs[1].is_marker() {
                inputs[2].clone() // zero contribution from a sparse factor row
            } else {
                let (_, _, lm) = inputs[0].as_dense().unwrap();
                let (_, _, ln) = inputs[1].as_dense().unwrap();
                let (_, _, a_mn) = inputs[2].as_dense().unwrap();
                Arc::new(DataItem::dense(b, b, gemm_kernel(b, lm, ln, a_mn)))
            };
            fanout(key, out, &all)
        }
    };

    let templates = vec![
        TaskTemplate {
            template_id: POTRF,
            name: "POTRF",
            arity_in: 1,
            body: Arc::new(potrf_body),
            is_stealable: stealable.clone(),
            priority_fn: mk_priority.clone(),
            local_successors: local_succ.clone(),
            cost_class: "potrf",
        },
        TaskTemplate {
            template_id: TRSM,
            name: "TRSM",
            arity_in: 2,
            body: Arc::new(trsm_body),
            is_stealable: stealable.clone(),
            priority_fn: mk_priority.clone(),
            local_successors: local_succ.clone(),
            cost_class: "trsm",
        },
        TaskTemplate {
            template_id: SYRK,
            name: "SYRK",
            arity_in: 2,
            body: Arc::new(syrk_body),
            is_stealable: stealable.clone(),
            priority_fn: mk_priority.clone(),
            local_successors: local_succ.clone(),
            cost_class: "syrk",
        },
        TaskTemplate {
            template_id: GEMM,
            name: "GEMM",
            arity_in: 3,
            body: Arc::new(gemm_body),
            is_stealable: stealable,
            priority_fn: mk_priority,
            local_successors: local_succ,
            cost_class: "gemm",
        },
    ];

    // every input tile is injected on the home node of its first consumer
    let init_cfg = cfg.clone();
    let initial = Arc::new(move |rank: Rank, nodes: u32| {
        let mut out = Vec::new();
        for m in 0..init_cfg.tiles {
            for n in 0..=m {
                let (key, slot) = first_consumer(m, n);
                if home_of(&init_cfg, &key, nodes) == rank {
                    out.push((key, slot, tile_item(&init_cfg, m, n)));
                }
            }
        }
        out
    });

    Ok(TaskGraphProgram::new(templates, initial, home))
}

/// Enumerate every task key of the DAG by walking the static wiring.
pub fn all_task_keys(tiles: usize) -> Vec<TaskKey> {
    let mut seen = HashSet::new();
    let mut queue = VecDeque::new();
    for m in 0..tiles {
        for n in 0..=m {
            let (key, _) = first_consumer(m, n);
            if seen.insert(key) {
                queue.push_back(key);
            }
        }
    }
    while let Some(key) = queue.pop_front() {
        for (skey, _) in successors(&key, tiles) {
            if seen.insert(skey) {
                queue.push_back(skey);
            }
        }
    }
    seen.into_iter().collect()
}

/// Max-abs relative error of the reconstruction L*L^T against the generated
/// A over dense tiles, given the factor tiles recorded by a run.
pub fn reconstruction_error(
    cfg: &CholeskyConfig,
    factors: &HashMap<(i64, i64), Arc<DataItem>>,
) -> f64 {
    let b = cfg.tile;
    let tile_of = |m: usize, n: usize| -> Option<&[f64]> {
        factors.get(&(m as i64, n as i64)).and_then(|d| d.as_dense().map(|(_, _, x)| x))
    };
    let mut max_rel: f64 = 0.0;
    for m in 0..cfg.tiles {
        for n in 0..=m {
            let Some(a) = a_tile(cfg, m, n) else { continue };
            let amax = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
            let mut recon = vec![0.0; b * b];
            for j in 0..=n {
                let (Some(lm), Some(ln)) = (tile_of(m, j), tile_of(n, j)) else { continue };
                for i in 0..b {
                    for c in 0..b {
                        let mut s = 0.0;
                        for t in 0..b {
                            s += lm[i * b + t] * ln[c * b + t];
                        }
                        recon[i * b + c] += s;
                    }
                }
            }
            for (r, v) in recon.iter().zip(a.iter()) {
                max_rel = max_rel.max((r - v).abs() / amax);
            }
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_half_dense_selection_t20() {
        let cfg = CholeskyConfig { tiles: 20, density: 0.5, ..Default::default() };
        let rows = sparse_rows(&cfg);
        let sparse_count: usize = rows.iter().sum();
        // 210 lower-triangle tiles, exactly 105 dense
        assert_eq!(sparse_count, 105);
        let dense = (0..20)
            .flat_map(|m| (0..=m).map(move |n| (m, n)))
            .filter(|&(m, n)| !is_sparse(&cfg, m, n))
            .count();
        assert_eq!(dense, 105);
    }

    #[test]
    fn closed_form_task_counts_t4() {
        let mut counts = [0usize; 4];
        for key in all_task_keys(4) {
            counts[key.template_id as usize] += 1;
        }
        // T, T(T-1)/2, T(T-1)/2, T(T-1)(T-2)/6
        assert_eq!(counts, [4, 6, 6, 4]);
    }

    #[test]
    fn single_tile_factor_matches_scalar_reference() {
        let cfg = CholeskyConfig { tiles: 1, tile: 8, density: 1.0, ..Default::default() };
        let a = a_tile(&cfg, 0, 0).unwrap();
        let l = potrf_kernel(8, &a);
        let l0 = l0_tile(&cfg, 0, 0).unwrap();
        for (x, y) in l.iter().zip(l0.iter()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn spd_check_passes_for_defaults() {
        let cfg = CholeskyConfig { tiles: 4, tile: 8, ..Default::default() };
        assert!(spd_sanity_check(&cfg).is_ok());
    }

    #[test]
    fn traced_dag_is_acyclic() {
        // topological sort of the static edge set at desk scale
        let tiles = 6;
        let keys = all_task_keys(tiles);
        let idx: HashMap<TaskKey, usize> =
            keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let mut indegree = vec![0usize; keys.len()];
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); keys.len()];
        for key in &keys {
            for (skey, _) in successors(key, tiles) {
                adj[idx[key]].push(idx[&skey]);
                indegree[idx[&skey]] += 1;
            }
        }
        let mut queue: VecDeque<usize> =
            (0..keys.len()).filter(|&i| indegree[i] == 0).collect();
        let mut visited = 0;
        while let Some(i) = queue.pop_front() {
            visited += 1;
            for &j in &adj[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    queue.push_back(j);
                }
            }
        }
        assert_eq!(visited, keys.len(), "cycle detected");
    }

    #[test]
    fn skewed_distribution_homes_dense_on_rank0() {
        let cfg = CholeskyConfig {
            tiles: 8,
            distribution: Distribution::Skewed(0),
            ..Default::default()
        };
        for key in all_task_keys(8) {
            let (row, col) = written_tile(&key);
            let home = home_of(&cfg, &key, 4);
            if !is_sparse(&cfg, row, col) {
                assert_eq!(home, 0);
            }
        }
    }

    #[test]
    fn home_is_independent_of_execution_site() {
        let cfg = CholeskyConfig::default();
        let key = TaskKey::k2(TRSM, 1, 3);
        let h = home_of(&cfg, &key, 4);
        for _ in 0..1000 {
            assert_eq!(home_of(&cfg, &key, 4), h);
        }
    }
}
