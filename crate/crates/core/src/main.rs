//! Benchmark harness CLI: run a benchmark over the chosen backend and write
//! the metrics artifacts. Exit code 0 means the run completed and every
//! post-run audit passed.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, ValueEnum};

use stealflow::bench::cholesky::{build_cholesky, CholeskyConfig, Distribution};
use stealflow::bench::uts::{build_uts, UtsAffinity, UtsConfig};
use stealflow::harness::{self, RunOutput};
use stealflow::migrate::{ThiefPolicy, VictimPolicy};
use stealflow::runtime::RunConfig;
use stealflow::scheduler::SchedulerPolicy;
use stealflow::taskgraph::TaskGraphProgram;
use stealflow::transport::parse_hostfile;

#[derive(Clone, Copy, ValueEnum)]
enum BenchmarkArg {
    Cholesky,
    Uts,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Inproc,
    Socket,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchedulerArg {
    Ap,
    #[value(name = "2q")]
    TwoQ,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn as_bool(self) -> bool {
        matches!(self, OnOff::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ThiefArg {
    Ready,
    #[value(name = "ready+succ")]
    ReadySucc,
}

#[derive(Clone, Copy, ValueEnum)]
enum VictimArg {
    Single,
    Chunk,
    Half,
}

#[derive(Parser)]
#[command(name = "stealflow", about = "task-based dataflow runtime benchmark harness")]
struct Cli {
    #[arg(long, value_enum, default_value = "cholesky")]
    benchmark: BenchmarkArg,

    /// Cholesky: tiles per matrix dimension.
    #[arg(long, default_value_t = 8)]
    tiles: usize,

    /// Cholesky: elements per tile dimension.
    #[arg(long, default_value_t = 16)]
    tile: usize,

    /// Cholesky: fraction of lower-triangle tiles that are dense.
    #[arg(long, default_value_t = 0.5)]
    density: f64,

    /// Cholesky tile distribution: "cyclic" or "skewed:R" (dense tiles all
    /// homed on rank R).
    #[arg(long, default_value = "cyclic")]
    distribution: String,

    /// UTS preset: "desk" (b0=64, m=5, q=0.19).
    #[arg(long, default_value = "desk")]
    preset: String,

    #[arg(long, default_value_t = 2)]
    nodes: u32,

    #[arg(long, default_value_t = 2)]
    workers: usize,

    #[arg(long, value_enum, default_value = "inproc")]
    backend: BackendArg,

    /// Socket backend: file with one "rank host:port" line per node.
    #[arg(long)]
    hostfile: Option<PathBuf>,

    /// Socket backend: the rank this process runs as.
    #[arg(long, default_value_t = 0)]
    rank: u32,

    #[arg(long, value_enum, default_value = "2q")]
    scheduler: SchedulerArg,

    #[arg(long, value_enum, default_value = "off")]
    steal: OnOff,

    #[arg(long, value_enum, default_value = "ready+succ")]
    thief_policy: ThiefArg,

    #[arg(long, value_enum, default_value = "single")]
    victim_policy: VictimArg,

    #[arg(long, default_value_t = 4)]
    chunk_size: usize,

    #[arg(long, value_enum, default_value = "on")]
    waiting_time_gate: OnOff,

    /// Metrics interval length in milliseconds.
    #[arg(long, default_value_t = 10_000)]
    interval_ms: u64,

    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Artificial per-task delay in microseconds (granularity lever).
    #[arg(long, default_value_t = 0)]
    task_delay: u64,

    /// Output directory for intervals.csv, summary.json and event logs.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_distribution(s: &str) -> Result<Distribution, String> {
    if s == "cyclic" {
        return Ok(Distribution::Cyclic);
    }
    if let Some(rank) = s.strip_prefix("skewed:") {
        return rank
            .parse::<u32>()
            .map(Distribution::Skewed)
            .map_err(|e| format!("bad skewed rank: {e}"));
    }
    Err(format!("unknown distribution {s:?} (expected cyclic or skewed:R)"))
}

fn build_program(cli: &Cli) -> Result<(Arc<TaskGraphProgram>, Option<CholeskyConfig>), String> {
    match cli.benchmark {
        BenchmarkArg::Cholesky => {
            let cfg = CholeskyConfig {
                tiles: cli.tiles,
                tile: cli.tile,
                density: cli.density,
                distribution: parse_distribution(&cli.distribution)?,
                seed: cli.seed,
            };
            let program = build_cholesky(&cfg).map_err(|e| e.to_string())?;
            Ok((Arc::new(program), Some(cfg)))
        }
        BenchmarkArg::Uts => {
            if cli.preset != "desk" {
                return Err(format!("unknown UTS preset {:?}", cli.preset));
            }
            let cfg = UtsConfig { seed: cli.seed, affinity: UtsAffinity::Root, ..Default::default() };
            let program = build_uts(&cfg).map_err(|e| e.to_string())?;
            Ok((Arc::new(program), None))
        }
    }
}

fn run_config(cli: &Cli) -> RunConfig {
    RunConfig {
        nodes: cli.nodes,
        workers: cli.workers,
        scheduler: match cli.scheduler {
            SchedulerArg::Ap => SchedulerPolicy::Ap,
            SchedulerArg::TwoQ => SchedulerPolicy::TwoQ,
        },
        steal: cli.steal.as_bool(),
        thief_policy: match cli.thief_policy {
            ThiefArg::Ready => ThiefPolicy::ReadyOnly,
            ThiefArg::ReadySucc => ThiefPolicy::ReadyPlusSuccessors,
        },
        victim_policy: match cli.victim_policy {
            VictimArg::Single => VictimPolicy::Single,
            VictimArg::Chunk => VictimPolicy::Chunk { chunk_size: cli.chunk_size },
            VictimArg::Half => VictimPolicy::Half,
        },
        waiting_time_gate: cli.waiting_time_gate.as_bool(),
        seed: cli.seed,
        interval_ns: cli.interval_ms.saturating_mul(1_000_000),
        task_delay: Duration::from_micros(cli.task_delay),
        ..Default::default()
    }
}

fn main() {
    let cli = Cli::parse();
    let cfg = run_config(&cli);

    let (program, cholesky_cfg) = match build_program(&cli) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    };

    let out: RunOutput = match cli.backend {
        BackendArg::Inproc => harness::run_inproc(program, &cfg),
        BackendArg::Socket => {
            let Some(hostfile) = &cli.hostfile else {
                eprintln!("error: --backend socket requires --hostfile");
                std::process::exit(2);
            };
            let text = match std::fs::read_to_string(hostfile) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read hostfile: {e}");
                    std::process::exit(2);
                }
            };
            let addrs = match parse_hostfile(&text) {
                Ok(a) => a,
                Err(e) => {
                    eprintln!("error: {e}");
                    std::process::exit(2);
                }
            };
            if addrs.len() != cfg.nodes as usize {
                eprintln!(
                    "error: hostfile lists {} ranks but --nodes is {}",
                    addrs.len(),
                    cfg.nodes
                );
                std::process::exit(2);
            }
            match harness::run_socket_rank(program, &cfg, cli.rank, addrs) {
                Ok(node) => RunOutput { per_rank: vec![node], makespan_ns: 0 },
                Err(e) => {
                    eprintln!("error: transport failure: {e}");
                    std::process::exit(1);
                }
            }
        }
    };

    if let Err(e) = harness::export_artifacts(&out, &cfg, &cli.out) {
        eprintln!("error: cannot write artifacts: {e}");
        std::process::exit(1);
    }
    for node in &out.per_rank {
        if let Err(e) = harness::export_events(node, &cli.out) {
            eprintln!("error: cannot write event log: {e}");
            std::process::exit(1);
        }
    }

    // socket mode sees only one rank's events, so the global exactly-once
    // audits only apply to an inproc run; per-rank checks still run
    let violations = harness::audit(&out, &cfg);
    let violations: Vec<String> = match cli.backend {
        BackendArg::Inproc => violations,
        BackendArg::Socket => violations
            .into_iter()
            .filter(|v| {
                !v.contains("never completed")
                    && !v.contains("completed without a local-activation insert")
            })
            .collect(),
    };

    let stats = out.steal_stats();
    println!(
        "nodes={} tasks={} makespan_ms={:.3} steal_success_pct={:.2} \
         avg_tasks_per_steal={:.2} rescheduled_pct={:.2}",
        out.nodes(),
        out.done_keys().len(),
        out.makespan_ns as f64 / 1e6,
        stats.steal_success_pct,
        stats.avg_tasks_per_successful_steal,
        stats.rescheduled_pct,
    );
    if let Some(bcfg) = &cholesky_cfg {
        if matches!(cli.backend, BackendArg::Inproc) {
            let err = stealflow::bench::cholesky::reconstruction_error(bcfg, &out.results());
            println!("reconstruction_max_rel_err={err:.3e}");
        }
    }

    if violations.is_empty() {
        println!("audit: clean");
    } else {
        for v in &violations {
            eprintln!("audit violation: {v}");
        }
        std::process::exit(1);
    }
}
