//! Instance-level scheduling: placement of arrivals, answering-phase
//! targeting at phase transitions, adaptive migration and the inter-instance
//! fabric.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::costmodel::LatencyProfile;
use crate::error::{Error, Result};
use crate::instance::{InstanceConfig, InstanceState, RequestState};
use crate::RequestId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    Fcfs,
    RoundRobin,
    /// Unlimited KV memory; nothing is ever blocked or preempted.
    Oracle,
    Pascal,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Fcfs, Policy::RoundRobin, Policy::Oracle, Policy::Pascal];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Fcfs => "fcfs",
            Policy::RoundRobin => "rr",
            Policy::Oracle => "oracle",
            Policy::Pascal => "pascal",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fcfs" => Ok(Policy::Fcfs),
            "rr" | "round-robin" => Ok(Policy::RoundRobin),
            "oracle" => Ok(Policy::Oracle),
            "pascal" => Ok(Policy::Pascal),
            other => Err(Error::invalid(
                "policy",
                format!("unknown policy `{other}` (expected fcfs, rr, oracle or pascal)"),
            )),
        }
    }
}

/// Ablations of the phase-aware policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Never migrate at phase transitions.
    pub no_migration: bool,
    /// Always migrate to the selected target, ignoring memory availability.
    pub non_adaptive: bool,
}

/// Per-instance state summary used for placement decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonitorSnapshot {
    pub instance: usize,
    /// Every answering request on the instance is keeping pace.
    pub slo_healthy: bool,
    /// KV tokens held on GPU and CPU.
    pub kv_tokens: u64,
    /// Requests in the high-priority queue.
    pub reasoning_requests: usize,
    /// Answering requests that have not exhausted a quantum.
    pub fresh_answering_requests: usize,
    pub free_gpu_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MigrationDecision {
    Stay,
    Migrate,
}

/// Lowest `(key, instance)` among healthy snapshots, and among all of them.
/// Single pass; this sits on every arrival and phase transition.
#[inline]
fn argmin_pair(
    snapshots: &[MonitorSnapshot],
    key: impl Fn(&MonitorSnapshot) -> u64,
) -> (Option<usize>, usize) {
    // (key, instance) packed into one integer so the running minima are
    // branch-free; ties go to the lower instance id.
    const NONE: u128 = u128::MAX;
    let mut healthy = NONE;
    let mut any = NONE;
    for s in snapshots {
        let k = (u128::from(key(s)) << 64) | s.instance as u128;
        any = any.min(k);
        healthy = healthy.min(if s.slo_healthy { k } else { NONE });
    }
    assert!(any != NONE, "at least one instance");
    let index = |packed: u128| packed as u64 as usize;
    ((healthy != NONE).then(|| index(healthy)), index(any))
}

/// Placement of a new reasoning request: least KV among instances whose
/// answering requests are all on pace, or among all instances if none are.
#[inline]
pub fn select_instance_reasoning(snapshots: &[MonitorSnapshot]) -> usize {
    let (healthy, any) = argmin_pair(snapshots, |s| s.kv_tokens);
    healthy.unwrap_or(any)
}

/// Target for a request entering its answering phase: fewest reasoning
/// requests among healthy instances; otherwise fewest reasoning plus fresh
/// answering requests overall.
#[inline]
pub fn select_instance_answering(snapshots: &[MonitorSnapshot]) -> usize {
    let (healthy, _) = argmin_pair(snapshots, |s| s.reasoning_requests as u64);
    healthy.unwrap_or_else(|| {
        argmin_pair(snapshots, |s| {
            (s.reasoning_requests + s.fresh_answering_requests) as u64
        })
        .1
    })
}

pub fn decide_migration(
    current: &MonitorSnapshot,
    target: &MonitorSnapshot,
    request_kv: u64,
    ablations: Ablations,
) -> MigrationDecision {
    if ablations.no_migration || target.instance == current.instance {
        return MigrationDecision::Stay;
    }
    if ablations.non_adaptive {
        return MigrationDecision::Migrate;
    }
    if current.free_gpu_tokens >= request_kv && target.free_gpu_tokens < request_kv {
        MigrationDecision::Stay
    } else {
        MigrationDecision::Migrate
    }
}

/// Initial placement. Baselines use least KV footprint; the phase-aware
/// policy filters out instances with lagging answering requests first.
#[inline]
pub fn route_arrival(snapshots: &[MonitorSnapshot], policy: Policy) -> usize {
    match policy {
        Policy::Pascal => select_instance_reasoning(snapshots),
        Policy::Fcfs | Policy::RoundRobin | Policy::Oracle => argmin_pair(snapshots, |s| s.kv_tokens).1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub request: RequestState,
    pub src: usize,
    pub dst: usize,
    pub start: f64,
    pub end: f64,
}

/// Inbound links, one per destination, each serving one transfer at a time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fabric {
    link_free_at: Vec<f64>,
    in_flight: BTreeMap<RequestId, Transfer>,
}

impl Fabric {
    pub fn new(instances: usize) -> Self {
        Self {
            link_free_at: vec![0.0; instances],
            in_flight: BTreeMap::new(),
        }
    }

    /// Queues a detached request on `dst`'s inbound link and returns its
    /// completion time.
    pub fn enqueue(
        &mut self,
        request: RequestState,
        src: usize,
        dst: usize,
        now: f64,
        profile: &LatencyProfile,
    ) -> Result<f64> {
        if src == dst {
            return Err(Error::SelfTransfer(src));
        }
        let link = self
            .link_free_at
            .get_mut(dst)
            .ok_or_else(|| Error::Invariant(format!("no inbound link for instance {dst}")))?;
        let begin = link.max(now);
        let end = begin + profile.transfer_latency(request.kv_tokens);
        *link = end;
        let id = request.spec.id;
        self.in_flight.insert(
            id,
            Transfer {
                request,
                src,
                dst,
                start: now,
                end,
            },
        );
        Ok(end)
    }

    pub fn finish(&mut self, id: RequestId) -> Option<Transfer> {
        self.in_flight.remove(&id)
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &Transfer> {
        self.in_flight.values()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub instances: Vec<InstanceState>,
    pub fabric: Fabric,
    pub policy: Policy,
    pub ablations: Ablations,
}

impl ClusterState {
    pub fn new(instance_count: usize, config: InstanceConfig, ablations: Ablations) -> Self {
        Self {
            instances: (0..instance_count)
                .map(|i| InstanceState::new(i, config))
                .collect(),
            fabric: Fabric::new(instance_count),
            policy: config.policy,
            ablations,
        }
    }

    pub fn snapshots(&self, now: f64) -> Vec<MonitorSnapshot> {
        self.instances.iter().map(|i| i.monitor_snapshot(now)).collect()
    }

    /// Moves a request off `src` and onto the fabric towards `dst`.
    pub fn start_transfer(
        &mut self,
        id: RequestId,
        src: usize,
        dst: usize,
        now: f64,
        profile: &LatencyProfile,
    ) -> Result<f64> {
        if src == dst {
            return Err(Error::SelfTransfer(src));
        }
        let request = self.instances[src].detach(id)?;
        self.fabric.enqueue(request, src, dst, now, profile)
    }

    /// Lands a finished transfer on its destination; returns that instance.
    pub fn complete_transfer(&mut self, id: RequestId, now: f64) -> Result<usize> {
        let Transfer {
            mut request,
            dst,
            start,
            ..
        } = self
            .fabric
            .finish(id)
            .ok_or_else(|| Error::Invariant(format!("no transfer in flight for request {id}")))?;
        request.timeline.migrations.push((start, now));
        self.instances[dst].insert_migrated(request, now);
        Ok(dst)
    }

    /// Live requests owned by instances plus those on the wire.
    pub fn census(&self) -> Vec<RequestId> {
        let mut ids: Vec<RequestId> = self
            .instances
            .iter()
            .flat_map(|i| i.requests().map(|r| r.spec.id))
            .chain(self.fabric.in_flight().map(|t| t.request.spec.id))
            .collect();
        ids.sort_unstable();
        ids
    }
}
