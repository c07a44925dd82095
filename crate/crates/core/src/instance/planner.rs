//! Iteration planning at decode-iteration boundaries.
//!
//! Candidates are walked in priority order against the GPU budget left after
//! in-flight actions. A candidate is admitted when it fits next to those
//! already admitted; resident candidates that do not fit are evicted to CPU
//! memory. Once a non-resident candidate is turned away nothing further is
//! brought in, which keeps lower-priority work from overtaking it. The
//! phase-aware policy additionally stops admitting low-queue work while a
//! resident, unexhausted high-queue request goes without.

use std::cmp::Ordering;

use super::{InstanceState, KvLocation, PendingAction, Phase, QueueClass, RequestState};
use crate::cluster::Policy;
use crate::costmodel::LatencyProfile;
use crate::error::{Error, Result};
use crate::RequestId;

/// Result of planning one iteration boundary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationPlan {
    /// Requests decoding in the new iteration, in priority order.
    pub batch: Vec<RequestId>,
    /// Duration of the decode iteration, if one was started.
    pub step_duration: Option<f64>,
    /// Prefills started now, with their latency.
    pub prefills: Vec<(RequestId, f64)>,
    /// Swap-ins that take time; the request joins a later iteration.
    pub swap_ins: Vec<(RequestId, f64)>,
    /// Evictions whose copy to CPU memory takes time.
    pub swap_outs: Vec<(RequestId, f64)>,
    /// Every request evicted by this plan.
    pub preempted: Vec<RequestId>,
    /// Non-resident requests that were turned away.
    pub denied: Vec<RequestId>,
}

impl IterationPlan {
    pub fn is_empty(&self) -> bool {
        self.batch.is_empty() && self.prefills.is_empty() && self.swap_ins.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Discipline {
    /// Arrival order.
    Arrival,
    /// Fewest exhausted quanta first, optionally behind the queue class.
    Quantum { phase_aware: bool },
}

#[derive(Debug, Clone, Copy)]
enum Decision {
    Run,
    SwapIn { latency: f64 },
    Prefill { latency: f64 },
    Allocate,
    Evict { latency: f64 },
    Deny,
}

fn compare(a: &RequestState, b: &RequestState, discipline: Discipline) -> Ordering {
    match discipline {
        Discipline::Arrival => a
            .spec
            .arrival_time
            .total_cmp(&b.spec.arrival_time)
            .then(a.spec.id.cmp(&b.spec.id)),
        Discipline::Quantum { phase_aware } => {
            let class = if phase_aware {
                a.queue.cmp(&b.queue)
            } else {
                Ordering::Equal
            };
            class
                .then(a.quanta_exhausted.cmp(&b.quanta_exhausted))
                .then(a.enqueued_at.total_cmp(&b.enqueued_at))
                .then(a.spec.id.cmp(&b.spec.id))
        }
    }
}

/// GPU tokens a candidate needs to take part in the coming iteration.
fn admission_need(r: &RequestState, swap_is_instant: bool) -> u64 {
    match r.kv_location {
        KvLocation::Gpu => r.kv_tokens + 1,
        KvLocation::Cpu if swap_is_instant => r.kv_tokens + 1,
        KvLocation::Cpu => r.kv_tokens,
        _ if r.phase == Phase::WaitingPrefill => {
            r.spec.prompt_tokens + u64::from(r.spec.reasoning_tokens == 0)
        }
        _ => r.kv_tokens + 1,
    }
}

impl InstanceState {
    /// Plans with the discipline matching the configured policy.
    pub fn plan(&mut self, now: f64, profile: &LatencyProfile) -> Result<IterationPlan> {
        match self.config.policy {
            Policy::Fcfs | Policy::Oracle => self.plan_iteration_fcfs(now, profile),
            Policy::RoundRobin | Policy::Pascal => self.plan_iteration(now, profile),
        }
    }

    /// Quantum-ordered planning. Under the phase-aware policy the high queue
    /// strictly precedes the low queue.
    pub fn plan_iteration(&mut self, now: f64, profile: &LatencyProfile) -> Result<IterationPlan> {
        let phase_aware = self.config.policy == Policy::Pascal;
        self.plan_ordered(now, profile, Discipline::Quantum { phase_aware })
    }

    /// Arrival-ordered planning.
    pub fn plan_iteration_fcfs(&mut self, now: f64, profile: &LatencyProfile) -> Result<IterationPlan> {
        self.plan_ordered(now, profile, Discipline::Arrival)
    }

    fn plan_ordered(
        &mut self,
        now: f64,
        profile: &LatencyProfile,
        discipline: Discipline,
    ) -> Result<IterationPlan> {
        if self.iteration.is_some() {
            return Err(Error::Invariant(format!(
                "instance {} planned while an iteration is in flight",
                self.id
            )));
        }
        let capacity = self.config.gpu_capacity;
        let busy: u64 = self
            .requests
            .values()
            .filter(|r| matches!(r.pending, Some(PendingAction::Prefill | PendingAction::SwapIn)))
            .map(|r| r.kv_tokens)
            .sum();
        let budget = capacity.saturating_sub(busy.saturating_add(self.pending_growth));

        let mut candidates: Vec<&RequestState> = self.requests.values().filter(|r| r.schedulable()).collect();
        candidates.sort_by(|a, b| compare(a, b, discipline));

        let phase_aware = matches!(discipline, Discipline::Quantum { phase_aware: true });
        let mut decisions: Vec<(RequestId, Decision)> = Vec::with_capacity(candidates.len());
        let mut used = 0u64;
        let mut outsiders_closed = false;
        let mut low_closed = false;
        for r in candidates {
            let swap = profile.swap_latency(r.kv_tokens);
            let need = admission_need(r, swap == 0.0);
            if need > capacity {
                return Err(Error::CapacityExceeded {
                    id: r.spec.id,
                    required: need,
                    capacity,
                });
            }
            let resident = r.kv_location == KvLocation::Gpu;
            let is_low = r.queue == QueueClass::Low;
            let allowed = (resident || !outsiders_closed) && !(low_closed && is_low);
            if allowed && used + need <= budget {
                used += need;
                let decision = match r.kv_location {
                    KvLocation::Gpu => Decision::Run,
                    KvLocation::Cpu => Decision::SwapIn { latency: swap },
                    _ if r.phase == Phase::WaitingPrefill => Decision::Prefill {
                        latency: profile.prefill_latency(r.spec.prompt_tokens),
                    },
                    _ => Decision::Allocate,
                };
                decisions.push((r.spec.id, decision));
                continue;
            }
            if resident {
                decisions.push((r.spec.id, Decision::Evict { latency: swap }));
                if phase_aware && !is_low && r.quanta_exhausted == 0 {
                    low_closed = true;
                }
            } else {
                decisions.push((r.spec.id, Decision::Deny));
                outsiders_closed = true;
            }
        }

        let mut plan = IterationPlan::default();
        for (id, decision) in decisions {
            self.apply_decision(id, decision, now, &mut plan);
        }
        if !plan.batch.is_empty() {
            let total_kv: u64 = plan.batch.iter().map(|id| self.requests[id].kv_tokens).sum();
            let step = profile.decode_step_latency(plan.batch.len(), total_kv);
            self.pending_growth += plan.batch.len() as u64;
            self.running_batch = plan.batch.clone();
            self.iteration = Some((now, now + step));
            plan.step_duration = Some(step);
        }
        Ok(plan)
    }

    fn apply_decision(&mut self, id: RequestId, decision: Decision, now: f64, plan: &mut IterationPlan) {
        let r = self.requests.get_mut(&id).expect("candidates are owned");
        match decision {
            Decision::Run => plan.batch.push(id),
            Decision::SwapIn { latency } => {
                self.cpu_used -= r.kv_tokens;
                self.gpu_used += r.kv_tokens;
                r.kv_location = KvLocation::Gpu;
                if let Some(start) = r.timeline.open_preemption.take() {
                    r.timeline.preemptions.push((start, now));
                }
                if latency > 0.0 {
                    r.pending = Some(PendingAction::SwapIn);
                    plan.swap_ins.push((id, latency));
                } else {
                    plan.batch.push(id);
                }
            }
            Decision::Prefill { latency } => {
                r.kv_tokens = r.spec.prompt_tokens;
                r.kv_location = KvLocation::Gpu;
                r.pending = Some(PendingAction::Prefill);
                r.timeline.first_admission = Some(now);
                self.gpu_used += r.kv_tokens;
                if r.spec.reasoning_tokens == 0 {
                    self.pending_growth += 1;
                }
                plan.prefills.push((id, latency));
            }
            Decision::Allocate => {
                r.kv_location = KvLocation::Gpu;
                r.timeline.first_admission = Some(now);
                self.gpu_used += r.kv_tokens;
                plan.batch.push(id);
            }
            Decision::Evict { latency } => {
                self.gpu_used -= r.kv_tokens;
                self.cpu_used += r.kv_tokens;
                r.kv_location = KvLocation::Cpu;
                r.timeline.open_preemption = Some(now);
                plan.preempted.push(id);
                if latency > 0.0 {
                    r.pending = Some(PendingAction::SwapOut);
                    plan.swap_outs.push((id, latency));
                }
            }
            Decision::Deny => {
                if r.timeline.first_admission.is_none() {
                    r.timeline.denied_before_admission = true;
                }
                plan.denied.push(id);
            }
        }
    }
}
