//! One serving instance: request lifecycle, hierarchical queues, KV memory
//! accounting, token emission and the monitor snapshot consumed by the
//! cluster scheduler.
//!
//! The iteration planner lives in [`planner`]; the token pacer in [`pacer`].

pub mod pacer;
mod planner;

use std::collections::BTreeMap;

pub use pacer::PacerState;
pub use planner::IterationPlan;

use crate::cluster::{MonitorSnapshot, Policy};
use crate::error::{Error, Result};
use crate::workload::RequestSpec;
use crate::RequestId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    WaitingPrefill,
    Reasoning,
    Answering,
    Migrating,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvLocation {
    /// No KV has been materialized on this instance yet.
    Unallocated,
    Gpu,
    Cpu,
    InTransit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum QueueClass {
    High,
    Low,
}

/// A per-request action in flight; the request is not schedulable until it
/// completes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PendingAction {
    Prefill,
    SwapIn,
    SwapOut,
}

/// Timestamps accumulated over a request's lifetime.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timeline {
    /// First time the planner admitted the request (prefill start).
    pub first_admission: Option<f64>,
    /// The planner turned the request away at least once before admitting it.
    pub denied_before_admission: bool,
    pub prefill_complete: Option<f64>,
    pub reasoning_end: Option<f64>,
    /// Start of the iteration (or prefill) that produced the first answering token.
    pub first_answer_iteration_start: Option<f64>,
    /// Generation time of every counted output token.
    pub token_times: Vec<f64>,
    /// Closed `(evicted, readmitted)` intervals.
    pub preemptions: Vec<(f64, f64)>,
    pub open_preemption: Option<f64>,
    /// `(start, end)` of each inter-instance transfer, queueing included.
    pub migrations: Vec<(f64, f64)>,
    /// Instances that owned the request, in order.
    pub instances: Vec<usize>,
    pub completion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestState {
    pub spec: RequestSpec,
    pub phase: Phase,
    /// Counted output tokens emitted so far, reasoning and answering.
    pub tokens_generated: u64,
    pub kv_tokens: u64,
    pub kv_location: KvLocation,
    pub quantum_used_in_round: u64,
    pub quanta_exhausted: u64,
    pub pacer: PacerState,
    pub queue: QueueClass,
    pub demoted: bool,
    /// When the request entered its current queue.
    pub enqueued_at: f64,
    pub pending: Option<PendingAction>,
    pub timeline: Timeline,
}

impl RequestState {
    pub fn new(spec: RequestSpec, now: f64, target_tpot: f64) -> Self {
        let mut timeline = Timeline::default();
        let (phase, kv_tokens) = if spec.kv_preloaded {
            timeline.prefill_complete = Some(spec.arrival_time);
            if spec.reasoning_tokens == 0 {
                timeline.reasoning_end = Some(spec.arrival_time);
                (Phase::Answering, spec.prompt_tokens)
            } else {
                (Phase::Reasoning, spec.prompt_tokens)
            }
        } else {
            (Phase::WaitingPrefill, 0)
        };
        let queue = if phase == Phase::Answering {
            QueueClass::Low
        } else {
            QueueClass::High
        };
        Self {
            spec,
            phase,
            tokens_generated: 0,
            kv_tokens,
            kv_location: KvLocation::Unallocated,
            quantum_used_in_round: 0,
            quanta_exhausted: 0,
            pacer: PacerState::new(target_tpot),
            queue,
            demoted: false,
            enqueued_at: now,
            pending: None,
            timeline,
        }
    }

    /// The end-of-reasoning marker is the token that brings the count to
    /// `reasoning_tokens`; with no reasoning it fires right after prefill.
    pub fn detect_phase_transition(&self) -> bool {
        self.phase == Phase::Reasoning && self.tokens_generated == self.spec.reasoning_tokens
    }

    pub fn is_finished(&self) -> bool {
        self.tokens_generated >= self.spec.output_tokens()
    }

    pub fn remaining_tokens(&self) -> u64 {
        self.spec.output_tokens().saturating_sub(self.tokens_generated)
    }

    /// Answering tokens delivered so far.
    pub fn answers_delivered(&self) -> u64 {
        self.pacer.delivered() as u64
    }

    fn schedulable(&self) -> bool {
        self.pending.is_none() && !matches!(self.phase, Phase::Done | Phase::Migrating)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceConfig {
    /// KV tokens that fit on the GPU; `u64::MAX` models unlimited memory.
    pub gpu_capacity: u64,
    pub token_quantum: u64,
    /// Reasoning requests whose KV exceeds this are demoted (strictly greater).
    pub demotion_threshold: u64,
    pub target_tpot: f64,
    /// Expected tokens a pacer may fall behind and still count as healthy.
    pub health_slack: usize,
    pub policy: Policy,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            gpu_capacity: u64::MAX,
            token_quantum: 500,
            demotion_threshold: 5000,
            target_tpot: 0.1,
            health_slack: 0,
            policy: Policy::Pascal,
        }
    }
}

/// What happened to a request when one of its tokens was emitted.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenEffect {
    Continue,
    /// Reasoning ended; the request waits in no queue until the caller
    /// settles or detaches it.
    Transition,
    Completed(Box<RequestState>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationOutcome {
    pub emitted: Vec<RequestId>,
    pub transitions: Vec<RequestId>,
    pub completed: Vec<RequestState>,
    pub demoted: Vec<RequestId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceState {
    pub id: usize,
    pub config: InstanceConfig,
    pub gpu_used: u64,
    pub cpu_used: u64,
    /// GPU tokens reserved for KV growth of in-flight tokens.
    pub pending_growth: u64,
    pub high_queue: Vec<RequestId>,
    pub low_queue: Vec<RequestId>,
    pub running_batch: Vec<RequestId>,
    /// `(start, end)` of the decode iteration in flight.
    pub iteration: Option<(f64, f64)>,
    requests: BTreeMap<RequestId, RequestState>,
}

impl InstanceState {
    pub fn new(id: usize, config: InstanceConfig) -> Self {
        Self {
            id,
            config,
            gpu_used: 0,
            cpu_used: 0,
            pending_growth: 0,
            high_queue: Vec::new(),
            low_queue: Vec::new(),
            running_batch: Vec::new(),
            iteration: None,
            requests: BTreeMap::new(),
        }
    }

    pub fn request(&self, id: RequestId) -> Option<&RequestState> {
        self.requests.get(&id)
    }

    pub fn requests(&self) -> impl Iterator<Item = &RequestState> {
        self.requests.values()
    }

    pub fn live_requests(&self) -> usize {
        self.requests.len()
    }

    pub fn is_idle(&self) -> bool {
        self.iteration.is_none()
    }

    pub fn free_gpu_tokens(&self) -> u64 {
        self.config
            .gpu_capacity
            .saturating_sub(self.gpu_used + self.pending_growth)
    }

    fn get_mut(&mut self, id: RequestId) -> Result<&mut RequestState> {
        let instance = self.id;
        self.requests
            .get_mut(&id)
            .ok_or_else(|| Error::Invariant(format!("request {id} is not on instance {instance}")))
    }

    fn enqueue(&mut self, id: RequestId, class: QueueClass) {
        match class {
            QueueClass::High => self.high_queue.push(id),
            QueueClass::Low => self.low_queue.push(id),
        }
    }

    fn dequeue(&mut self, id: RequestId) {
        self.high_queue.retain(|&q| q != id);
        self.low_queue.retain(|&q| q != id);
    }

    /// Registers a newly routed request.
    pub fn admit_arrival(&mut self, spec: RequestSpec, now: f64) {
        let mut state = RequestState::new(spec, now, self.config.target_tpot);
        state.timeline.instances.push(self.id);
        let class = state.queue;
        self.requests.insert(spec.id, state);
        self.enqueue(spec.id, class);
    }

    /// Accepts a request whose KV just arrived over the fabric. It lands on
    /// the GPU when there is room, otherwise in CPU memory.
    pub fn insert_migrated(&mut self, mut state: RequestState, now: f64) {
        state.phase = Phase::Answering;
        state.queue = QueueClass::Low;
        state.enqueued_at = now;
        state.pending = None;
        if self.free_gpu_tokens() >= state.kv_tokens {
            state.kv_location = KvLocation::Gpu;
            self.gpu_used += state.kv_tokens;
        } else {
            state.kv_location = KvLocation::Cpu;
            self.cpu_used += state.kv_tokens;
        }
        state.timeline.instances.push(self.id);
        let id = state.spec.id;
        self.requests.insert(id, state);
        self.low_queue.push(id);
    }

    /// Removes a request and its KV accounting from this instance.
    pub fn detach(&mut self, id: RequestId) -> Result<RequestState> {
        if self.running_batch.contains(&id) {
            return Err(Error::Invariant(format!("request {id} is in the running batch")));
        }
        let mut state = self
            .requests
            .remove(&id)
            .ok_or_else(|| Error::Invariant(format!("request {id} is not on instance {}", self.id)))?;
        if state.pending.is_some() {
            return Err(Error::Invariant(format!("request {id} has an action in flight")));
        }
        self.dequeue(id);
        match state.kv_location {
            KvLocation::Gpu => self.gpu_used -= state.kv_tokens,
            KvLocation::Cpu => self.cpu_used -= state.kv_tokens,
            KvLocation::Unallocated | KvLocation::InTransit => {}
        }
        state.kv_location = KvLocation::InTransit;
        state.phase = Phase::Migrating;
        Ok(state)
    }

    /// Places a request that just finished reasoning into the low-priority
    /// queue of this instance. Under the phase-aware policy the queue change
    /// restarts its quantum accounting.
    pub fn settle_transition(&mut self, id: RequestId, now: f64) -> Result<()> {
        let phase_aware = self.config.policy == Policy::Pascal;
        let r = self.get_mut(id)?;
        r.queue = QueueClass::Low;
        if phase_aware {
            r.quanta_exhausted = 0;
            r.quantum_used_in_round = 0;
            r.enqueued_at = now;
        }
        self.low_queue.push(id);
        Ok(())
    }

    /// Moves every high-priority request whose KV exceeds the demotion
    /// threshold to the low-priority queue. Its phase label is unchanged.
    pub fn apply_demotion(&mut self, now: f64) -> Vec<RequestId> {
        let threshold = self.config.demotion_threshold;
        let demoted: Vec<RequestId> = self
            .high_queue
            .iter()
            .copied()
            .filter(|id| self.requests[id].kv_tokens > threshold)
            .collect();
        for &id in &demoted {
            self.high_queue.retain(|&q| q != id);
            self.low_queue.push(id);
            let r = self.requests.get_mut(&id).expect("queued requests are owned");
            r.queue = QueueClass::Low;
            r.demoted = true;
            r.enqueued_at = now;
        }
        demoted
    }

    pub fn monitor_snapshot(&self, now: f64) -> MonitorSnapshot {
        let slack = self.config.health_slack;
        let slo_healthy = self
            .requests
            .values()
            .filter(|r| r.phase == Phase::Answering)
            .all(|r| r.pacer.is_healthy(now, r.spec.answering_tokens as usize, slack));
        let fresh_answering_requests = self
            .low_queue
            .iter()
            .filter(|id| {
                let r = &self.requests[id];
                r.phase == Phase::Answering && r.quanta_exhausted == 0
            })
            .count();
        MonitorSnapshot {
            instance: self.id,
            slo_healthy,
            kv_tokens: self.gpu_used + self.cpu_used,
            reasoning_requests: self.high_queue.len(),
            fresh_answering_requests,
            free_gpu_tokens: self.config.gpu_capacity.saturating_sub(self.gpu_used),
        }
    }

    /// Emits one counted token for `id` at `now`.
    fn emit_token(&mut self, id: RequestId, now: f64, produced_since: f64) -> Result<TokenEffect> {
        let quantum = self.config.token_quantum;
        self.gpu_used += 1;
        self.pending_growth = self
            .pending_growth
            .checked_sub(1)
            .ok_or_else(|| Error::Invariant("token emitted without reserved growth".into()))?;
        let r = self.get_mut(id)?;
        r.tokens_generated += 1;
        r.kv_tokens += 1;
        r.timeline.token_times.push(now);
        r.quantum_used_in_round += 1;
        if r.quantum_used_in_round >= quantum {
            r.quantum_used_in_round = 0;
            r.quanta_exhausted += 1;
        }
        match r.phase {
            Phase::Reasoning => {
                if r.detect_phase_transition() {
                    r.phase = Phase::Answering;
                    r.timeline.reasoning_end = Some(now);
                    self.dequeue(id);
                    return Ok(TokenEffect::Transition);
                }
                Ok(TokenEffect::Continue)
            }
            Phase::Answering => {
                let index = r.pacer.delivered();
                r.pacer.on_delivery(index, now)?;
                if index == 0 {
                    r.timeline.first_answer_iteration_start = Some(produced_since);
                }
                if r.is_finished() {
                    return Ok(TokenEffect::Completed(Box::new(self.finish(id, now)?)));
                }
                Ok(TokenEffect::Continue)
            }
            other => Err(Error::Invariant(format!(
                "request {id} emitted a token in phase {other:?}"
            ))),
        }
    }

    fn finish(&mut self, id: RequestId, now: f64) -> Result<RequestState> {
        let mut state = self
            .requests
            .remove(&id)
            .ok_or_else(|| Error::Invariant(format!("request {id} vanished")))?;
        self.dequeue(id);
        match state.kv_location {
            KvLocation::Gpu => self.gpu_used -= state.kv_tokens,
            KvLocation::Cpu => self.cpu_used -= state.kv_tokens,
            _ => {}
        }
        state.phase = Phase::Done;
        state.timeline.completion = Some(now);
        Ok(state)
    }

    /// Finishes the decode iteration in flight: one token per batched
    /// request, quantum accounting, phase-transition detection and (for the
    /// phase-aware policy) demotion.
    pub fn complete_iteration(&mut self, now: f64) -> Result<IterationOutcome> {
        let (start, _) = self
            .iteration
            .take()
            .ok_or_else(|| Error::Invariant(format!("instance {} has no iteration in flight", self.id)))?;
        let batch = std::mem::take(&mut self.running_batch);
        let mut outcome = IterationOutcome::default();
        for id in batch {
            match self.emit_token(id, now, start)? {
                TokenEffect::Continue => {}
                TokenEffect::Transition => outcome.transitions.push(id),
                TokenEffect::Completed(state) => outcome.completed.push(*state),
            }
            outcome.emitted.push(id);
        }
        if self.config.policy == Policy::Pascal {
            outcome.demoted = self.apply_demotion(now);
        }
        Ok(outcome)
    }

    /// Finishes a prefill. A request without reasoning turns its prefill
    /// output into the first answering token.
    pub fn complete_prefill(&mut self, id: RequestId, now: f64) -> Result<TokenEffect> {
        let r = self.get_mut(id)?;
        if r.pending != Some(PendingAction::Prefill) {
            return Err(Error::Invariant(format!("request {id} is not prefilling")));
        }
        r.pending = None;
        r.timeline.prefill_complete = Some(now);
        r.phase = Phase::Reasoning;
        if !r.detect_phase_transition() {
            return Ok(TokenEffect::Continue);
        }
        r.phase = Phase::Answering;
        r.timeline.reasoning_end = Some(now);
        let started = r.timeline.first_admission.unwrap_or(now);
        self.dequeue(id);
        match self.emit_token(id, now, started)? {
            TokenEffect::Completed(state) => Ok(TokenEffect::Completed(state)),
            _ => Ok(TokenEffect::Transition),
        }
    }

    pub fn complete_swap(&mut self, id: RequestId) -> Result<()> {
        let r = self.get_mut(id)?;
        match r.pending {
            Some(PendingAction::SwapIn | PendingAction::SwapOut) => {
                r.pending = None;
                Ok(())
            }
            _ => Err(Error::Invariant(format!("request {id} has no swap in flight"))),
        }
    }

    /// Memory and queue-membership invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invariant(format!("instance {}: {msg}", self.id)));
        if self.gpu_used.saturating_add(self.pending_growth) > self.config.gpu_capacity {
            return fail(format!(
                "gpu_used {} + reserved {} exceeds capacity {}",
                self.gpu_used, self.pending_growth, self.config.gpu_capacity
            ));
        }
        let on_gpu: u64 = self
            .requests
            .values()
            .filter(|r| r.kv_location == KvLocation::Gpu)
            .map(|r| r.kv_tokens)
            .sum();
        let on_cpu: u64 = self
            .requests
            .values()
            .filter(|r| r.kv_location == KvLocation::Cpu)
            .map(|r| r.kv_tokens)
            .sum();
        if on_gpu != self.gpu_used || on_cpu != self.cpu_used {
            return fail(format!(
                "accounting gpu {}/{} cpu {}/{}",
                self.gpu_used, on_gpu, self.cpu_used, on_cpu
            ));
        }
        for (id, r) in &self.requests {
            let queued = self.high_queue.iter().filter(|&&q| q == *id).count()
                + self.low_queue.iter().filter(|&&q| q == *id).count();
            if queued != 1 {
                return fail(format!("request {id} appears in {queued} queues"));
            }
            if r.phase != Phase::WaitingPrefill
                && r.kv_location != KvLocation::Unallocated
                && r.kv_tokens != r.spec.prompt_tokens + r.tokens_generated
            {
                return fail(format!("request {id} kv {} != prompt + generated", r.kv_tokens));
            }
        }
        Ok(())
    }
}
