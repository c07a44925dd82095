//! Deterministic discrete-event simulator of a multi-instance LLM serving
//! cluster serving reasoning models.
//!
//! Requests pass through a prefill, a hidden reasoning phase and a
//! user-visible answering phase. The simulator compares four scheduling
//! policies on top of the same engine:
//!
//! - `fcfs`: arrival-order admission with blocking and latest-first preemption,
//! - `rr`: round-robin over a fixed token quantum,
//! - `oracle`: unlimited KV memory, no blocking or preemption,
//! - `pascal`: phase-aware placement, hierarchical per-instance queues,
//!   demotion of oversized reasoning requests and adaptive migration at the
//!   reasoning/answering boundary.
//!
//! ```text
//!  trace ──▶ engine ──▶ cluster (placement, fabric) ──▶ instance (queues, planner, pacer)
//!                │
//!                └──▶ records ──▶ metrics ──▶ report
//! ```

pub mod cluster;
pub mod config;
pub mod costmodel;
pub mod engine;
pub mod error;
pub mod instance;
pub mod kv;
pub mod metrics;
pub mod report;
pub mod workload;

pub use cluster::{Ablations, MigrationDecision, MonitorSnapshot, Policy};
pub use config::RunConfig;
pub use costmodel::LatencyProfile;
pub use engine::{run, RunOutput, Simulation};
pub use error::{Error, Result};
pub use metrics::{RequestRecord, RunReport};
pub use workload::{LengthDistribution, RequestSpec, Trace};

/// Request identifier, unique within a trace.
pub type RequestId = u64;
