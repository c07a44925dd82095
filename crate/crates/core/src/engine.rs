//! Discrete-event core. Events pop in `(time, sequence)` order; every event
//! mutates one instance (or the fabric) and, if that instance is idle,
//! immediately plans its next iteration.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use crate::cluster::{self, ClusterState, MigrationDecision, Policy};
use crate::config::{Capacity, RunConfig};
use crate::costmodel::LatencyProfile;
use crate::error::{Error, Result};
use crate::instance::{RequestState, TokenEffect};
use crate::metrics::RequestRecord;
use crate::workload::{RequestSpec, Trace};
use crate::RequestId;

pub const EVENT_LOG_FORMAT: &str = "pascal-events-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Index into the trace.
    Arrival(usize),
    IterationComplete(usize),
    PrefillComplete {
        instance: usize,
        request: RequestId,
    },
    SwapComplete {
        instance: usize,
        request: RequestId,
    },
    TransferComplete(RequestId),
}

impl EventKind {
    fn name(&self) -> &'static str {
        match self {
            EventKind::Arrival(_) => "arrival",
            EventKind::IterationComplete(_) => "iteration-complete",
            EventKind::PrefillComplete { .. } => "prefill-complete",
            EventKind::SwapComplete { .. } => "swap-complete",
            EventKind::TransferComplete(_) => "transfer-complete",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub sequence: u64,
    pub kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.sequence.cmp(&self.sequence))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Run-level counters that are not part of any single request's record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    /// Per-instance KV capacity actually used.
    pub gpu_capacity: u64,
    pub events: u64,
    pub preemptions: u64,
    pub migrations: u64,
    /// Time from migration decision to landing, per transfer.
    pub transfer_latencies: Vec<f64>,
    /// Peak reserved GPU tokens (resident KV plus growth) per instance.
    pub peak_kv: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// One record per request, ordered by id.
    pub records: Vec<RequestRecord>,
    pub stats: RunStats,
    pub event_log: Option<String>,
}

pub struct Simulation {
    clock: f64,
    next_sequence: u64,
    queue: BinaryHeap<Event>,
    cluster: ClusterState,
    profile: LatencyProfile,
    trace: Vec<RequestSpec>,
    records: Vec<RequestRecord>,
    stats: RunStats,
    log: Option<String>,
}

impl Simulation {
    pub fn new(
        trace: &Trace,
        config: &RunConfig,
        profile: &LatencyProfile,
        gpu_capacity: u64,
        log_events: bool,
    ) -> Result<Self> {
        config.validate()?;
        profile.validate()?;
        for r in trace.iter() {
            if r.peak_kv_tokens() > gpu_capacity {
                return Err(Error::CapacityExceeded {
                    id: r.id,
                    required: r.peak_kv_tokens(),
                    capacity: gpu_capacity,
                });
            }
        }
        let cluster = ClusterState::new(
            config.instance_count,
            config.instance_config(gpu_capacity),
            config.ablations,
        );
        let mut sim = Self {
            clock: 0.0,
            next_sequence: 0,
            queue: BinaryHeap::new(),
            cluster,
            profile: *profile,
            trace: trace.requests().to_vec(),
            records: Vec::with_capacity(trace.len()),
            stats: RunStats {
                gpu_capacity,
                peak_kv: vec![0; config.instance_count],
                ..RunStats::default()
            },
            log: log_events.then(|| format!("{EVENT_LOG_FORMAT}\ntime,sequence,kind,subject,detail\n")),
        };
        for (idx, r) in trace.iter().enumerate() {
            sim.push(r.arrival_time, EventKind::Arrival(idx));
        }
        Ok(sim)
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn cluster(&self) -> &ClusterState {
        &self.cluster
    }

    pub fn records(&self) -> &[RequestRecord] {
        &self.records
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Ids of every request that has arrived but not finished, from the
    /// instances and the fabric, sorted. Duplicates indicate a bug.
    pub fn census(&self) -> Vec<RequestId> {
        self.cluster.census()
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.push(Event { time, sequence, kind });
    }

    /// Processes the next event; returns false when the queue is empty.
    pub fn step(&mut self) -> Result<bool> {
        let Some(event) = self.queue.pop() else {
            return Ok(false);
        };
        if event.time < self.clock {
            return Err(Error::Invariant(format!(
                "clock regression from {} to {} at event {}",
                self.clock, event.time, event.sequence
            )));
        }
        self.clock = event.time;
        self.stats.events += 1;
        let now = event.time;
        let (subject, detail) = match event.kind {
            EventKind::Arrival(idx) => {
                let spec = self.trace[idx];
                let snapshots = self.cluster.snapshots(now);
                let target = cluster::route_arrival(&snapshots, self.cluster.policy);
                self.cluster.instances[target].admit_arrival(spec, now);
                let detail = self.kick(target, now)?;
                (spec.id, format!("instance={target};{detail}"))
            }
            EventKind::IterationComplete(i) => {
                let outcome = self.cluster.instances[i].complete_iteration(now)?;
                let mut detail = format!(
                    "tokens={};completed={};transitions={};demoted={}",
                    outcome.emitted.len(),
                    outcome.completed.len(),
                    outcome.transitions.len(),
                    outcome.demoted.len()
                );
                for state in outcome.completed {
                    self.finish(state)?;
                }
                for id in outcome.transitions {
                    let _ = write!(detail, ";{}", self.resolve_transition(i, id, now)?);
                }
                let _ = write!(detail, ";{}", self.kick(i, now)?);
                (i as u64, detail)
            }
            EventKind::PrefillComplete { instance, request } => {
                let mut detail = format!("instance={instance}");
                match self.cluster.instances[instance].complete_prefill(request, now)? {
                    TokenEffect::Continue => {}
                    TokenEffect::Completed(state) => {
                        detail.push_str(";completed");
                        self.finish(*state)?;
                    }
                    TokenEffect::Transition => {
                        let _ = write!(detail, ";{}", self.resolve_transition(instance, request, now)?);
                    }
                }
                let _ = write!(detail, ";{}", self.kick(instance, now)?);
                (request, detail)
            }
            EventKind::SwapComplete { instance, request } => {
                self.cluster.instances[instance].complete_swap(request)?;
                let detail = self.kick(instance, now)?;
                (request, format!("instance={instance};{detail}"))
            }
            EventKind::TransferComplete(request) => {
                let dst = self.cluster.complete_transfer(request, now)?;
                let detail = self.kick(dst, now)?;
                (request, format!("instance={dst};{detail}"))
            }
        };
        if let Some(log) = &mut self.log {
            let _ = writeln!(
                log,
                "{},{},{},{},{}",
                crate::kv::format_seconds(now),
                event.sequence,
                event.kind.name(),
                subject,
                detail
            );
        }
        for (peak, inst) in self.stats.peak_kv.iter_mut().zip(&self.cluster.instances) {
            *peak = (*peak).max(inst.gpu_used + inst.pending_growth);
            inst.check_invariants()?;
        }
        Ok(true)
    }

    /// Plans the instance's next iteration if it is idle.
    fn kick(&mut self, i: usize, now: f64) -> Result<String> {
        let inst = &mut self.cluster.instances[i];
        if !inst.is_idle() || inst.live_requests() == 0 {
            return Ok("plan=none".into());
        }
        let plan = inst.plan(now, &self.profile)?;
        for &(request, latency) in &plan.prefills {
            self.push(now + latency, EventKind::PrefillComplete { instance: i, request });
        }
        for &(request, latency) in plan.swap_ins.iter().chain(&plan.swap_outs) {
            self.push(now + latency, EventKind::SwapComplete { instance: i, request });
        }
        if let Some(step) = plan.step_duration {
            self.push(now + step, EventKind::IterationComplete(i));
        }
        self.stats.preemptions += plan.preempted.len() as u64;
        Ok(format!(
            "batch={};prefills={};preempted={};denied={}",
            plan.batch.len(),
            plan.prefills.len(),
            plan.preempted.len(),
            plan.denied.len()
        ))
    }

    /// Places a request that just finished reasoning: stays on its instance
    /// or goes onto the fabric.
    fn resolve_transition(&mut self, i: usize, id: RequestId, now: f64) -> Result<String> {
        if self.cluster.policy == Policy::Pascal {
            let snapshots = self.cluster.snapshots(now);
            let target = cluster::select_instance_answering(&snapshots);
            let kv = self.cluster.instances[i]
                .request(id)
                .map(|r| r.kv_tokens)
                .ok_or_else(|| Error::Invariant(format!("request {id} missing at transition")))?;
            let decision =
                cluster::decide_migration(&snapshots[i], &snapshots[target], kv, self.cluster.ablations);
            if decision == MigrationDecision::Migrate {
                let end = self.cluster.start_transfer(id, i, target, now, &self.profile)?;
                self.push(end, EventKind::TransferComplete(id));
                self.stats.migrations += 1;
                self.stats.transfer_latencies.push(end - now);
                return Ok(format!("migrate={id}->{target}"));
            }
        }
        self.cluster.instances[i].settle_transition(id, now)?;
        Ok(format!("stay={id}"))
    }

    fn finish(&mut self, state: RequestState) -> Result<()> {
        self.records.push(RequestRecord::from_state(state)?);
        Ok(())
    }

    /// Runs to completion.
    pub fn run_to_end(mut self) -> Result<RunOutput> {
        while self.step()? {}
        if self.records.len() != self.trace.len() {
            return Err(Error::Invariant(format!(
                "{} of {} requests finished",
                self.records.len(),
                self.trace.len()
            )));
        }
        self.records.sort_by_key(|r| r.spec.id);
        Ok(RunOutput {
            records: self.records,
            stats: self.stats,
            event_log: self.log,
        })
    }
}

/// Peak per-instance KV reservation of an unconstrained run of `trace`.
pub fn oracle_peak(trace: &Trace, config: &RunConfig, profile: &LatencyProfile) -> Result<u64> {
    let oracle = RunConfig {
        policy: Policy::Oracle,
        ..config.clone()
    };
    let out = Simulation::new(trace, &oracle, profile, u64::MAX, false)?.run_to_end()?;
    Ok(out.stats.peak_kv.into_iter().max().unwrap_or(0))
}

/// Per-instance capacity for a run. The oracle policy always gets unlimited
/// memory. A fractional capacity never drops below the largest single
/// request, which would otherwise make the trace unrunnable.
pub fn resolve_capacity(trace: &Trace, config: &RunConfig, profile: &LatencyProfile) -> Result<u64> {
    if config.policy == Policy::Oracle {
        return Ok(u64::MAX);
    }
    match config.capacity {
        Capacity::Tokens(t) => Ok(t),
        Capacity::Fraction(f) => {
            let peak = oracle_peak(trace, config, profile)?;
            let largest = trace.iter().map(|r| r.peak_kv_tokens()).max().unwrap_or(1);
            Ok(((f * peak as f64).ceil() as u64).max(largest))
        }
    }
}

/// Simulates `trace` under `config`. The engine itself is deterministic;
/// `seed` is accepted for interface symmetry with trace generation and has
/// no effect on the schedule.
pub fn run(trace: &Trace, config: &RunConfig, profile: &LatencyProfile, seed: u64) -> Result<RunOutput> {
    run_with_log(trace, config, profile, seed, false)
}

pub fn run_with_log(
    trace: &Trace,
    config: &RunConfig,
    profile: &LatencyProfile,
    _seed: u64,
    log_events: bool,
) -> Result<RunOutput> {
    let capacity = resolve_capacity(trace, config, profile)?;
    Simulation::new(trace, config, profile, capacity, log_events)?.run_to_end()
}
