//! A miniature task-based dataflow runtime for distributed memory with
//! inter-node work stealing.
//!
//! Programs are collections of task templates wired into a DAG by their
//! bodies' outputs. Each node owns the tasks homed on it, executes ready
//! tasks with a pool of workers, and — when starving — steals ready tasks
//! from a randomly chosen victim, subject to a waiting-time admission gate.
//! Termination is detected with a Safra-style token ring over the message
//! counts of task-carrying traffic.

pub mod bench;
pub mod events;
pub mod harness;
pub mod metrics;
pub mod migrate;
pub mod runtime;
pub mod scheduler;
pub mod taskgraph;
pub mod transport;

pub use harness::{audit, export_artifacts, run_inproc, run_socket_rank, RunOutput};
pub use runtime::{NodeRuntime, RunConfig};
pub use scheduler::SchedulerPolicy;
pub use taskgraph::{DataItem, TaskGraphProgram, TaskKey};
