//! User-experience and throughput metrics over finished request records.

use crate::error::{Error, Result};
use crate::instance::{pacer::digest_schedule, RequestState};
use crate::workload::RequestSpec;
use crate::RequestId;

/// Everything the metrics need about one finished request.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub spec: RequestSpec,
    pub arrival: f64,
    /// When the request was first admitted (prefill start, or first batch
    /// for preloaded requests).
    pub first_admission: f64,
    pub prefill_complete: f64,
    pub reasoning_end: f64,
    pub first_answer_delivery: f64,
    /// Start of the iteration that produced the first answering token.
    pub first_answer_iteration_start: f64,
    /// Generation time of every output token, reasoning included.
    pub token_times: Vec<f64>,
    pub answer_delivery_times: Vec<f64>,
    pub answer_digest_times: Vec<f64>,
    pub migration_intervals: Vec<(f64, f64)>,
    pub preemption_intervals: Vec<(f64, f64)>,
    /// Time spent waiting for first admission after being turned away.
    pub blocked_interval_total: f64,
    pub completion: f64,
    pub instances: Vec<usize>,
}

impl RequestRecord {
    /// Builds the record of a request that has reached `done`.
    pub fn from_state(state: RequestState) -> Result<Self> {
        let id = state.spec.id;
        let missing = |what: &str| Error::Invariant(format!("request {id} finished without {what}"));
        let t = state.timeline;
        let first_admission = t.first_admission.ok_or_else(|| missing("admission"))?;
        let first_answer_delivery = state
            .pacer
            .first_answer_delivery_time()
            .ok_or_else(|| missing("answering tokens"))?;
        if t.open_preemption.is_some() {
            return Err(missing("closing its last preemption"));
        }
        let blocked_interval_total = if t.denied_before_admission {
            first_admission - state.spec.arrival_time
        } else {
            0.0
        };
        Ok(Self {
            spec: state.spec,
            arrival: state.spec.arrival_time,
            first_admission,
            prefill_complete: t.prefill_complete.ok_or_else(|| missing("prefill"))?,
            reasoning_end: t.reasoning_end.ok_or_else(|| missing("reasoning end"))?,
            first_answer_delivery,
            first_answer_iteration_start: t
                .first_answer_iteration_start
                .ok_or_else(|| missing("first answering iteration"))?,
            token_times: t.token_times,
            answer_delivery_times: state.pacer.delivery_times,
            answer_digest_times: state.pacer.digest_times,
            migration_intervals: t.migrations,
            preemption_intervals: t.preemptions,
            blocked_interval_total,
            completion: t.completion.ok_or_else(|| missing("completion"))?,
            instances: t.instances,
        })
    }

    pub fn id(&self) -> RequestId {
        self.spec.id
    }

    pub fn migration_time(&self) -> f64 {
        self.migration_intervals.iter().map(|(s, e)| e - s).sum()
    }
}

pub fn ttft(record: &RequestRecord) -> f64 {
    record.first_answer_delivery - record.arrival
}

pub fn ttfat(record: &RequestRecord) -> f64 {
    record.first_answer_delivery - record.reasoning_end
}

/// Ratio of the area under the digested-token curve to the area under the
/// expected-token curve, both step functions starting at the first answer.
pub fn qoe(record: &RequestRecord, target_tpot: f64) -> f64 {
    qoe_from_deliveries(&record.answer_delivery_times, target_tpot)
}

pub fn qoe_from_deliveries(deliveries: &[f64], target_tpot: f64) -> f64 {
    qoe_from_digests(&digest_schedule(deliveries, target_tpot), target_tpot)
}

/// Closed form of the step-curve integrals over `[t0, T]`, where `T` is the
/// last digest: token k contributes `T - d_k` to the digested area and
/// `max(0, T - e_k)` to the expected area.
pub fn qoe_from_digests(digests: &[f64], target_tpot: f64) -> f64 {
    let (Some(&t0), Some(&end)) = (digests.first(), digests.last()) else {
        return 1.0;
    };
    if end <= t0 {
        return 1.0;
    }
    let digested: f64 = digests.iter().map(|d| end - d).sum();
    let expected: f64 = (0..digests.len())
        .map(|k| (end - (t0 + k as f64 * target_tpot)).max(0.0))
        .sum();
    (digested / expected).clamp(0.0, 1.0)
}

pub fn slo_violated(record: &RequestRecord, target_tpot: f64, threshold: f64) -> bool {
    qoe(record, target_tpot) < threshold
}

/// Wait between the end of reasoning and the start of the iteration that
/// produced the first answering token, excluding time on the fabric.
pub fn blocking_latency(record: &RequestRecord) -> f64 {
    (record.first_answer_iteration_start - record.reasoning_end - record.migration_time()).max(0.0)
}

/// Nearest-rank percentile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn sorted(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v
}

pub const BIN_WIDTH: u64 = 256;
pub const MIN_BIN_SAMPLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatKind {
    Max,
    P90,
    P95,
    P99,
}

impl StatKind {
    pub fn for_samples(n: usize) -> Self {
        match n {
            0..=9 => StatKind::Max,
            10..=19 => StatKind::P90,
            20..=99 => StatKind::P95,
            _ => StatKind::P99,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StatKind::Max => "max",
            StatKind::P90 => "p90",
            StatKind::P95 => "p95",
            StatKind::P99 => "p99",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "max" => Some(StatKind::Max),
            "p90" => Some(StatKind::P90),
            "p95" => Some(StatKind::P95),
            "p99" => Some(StatKind::P99),
            _ => None,
        }
    }

    fn apply(self, sorted: &[f64]) -> f64 {
        match self {
            StatKind::Max => *sorted.last().expect("non-empty bin"),
            StatKind::P90 => nearest_rank(sorted, 90.0),
            StatKind::P95 => nearest_rank(sorted, 95.0),
            StatKind::P99 => nearest_rank(sorted, 99.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailBin {
    pub lo: u64,
    pub hi: u64,
    pub samples: usize,
    pub kind: StatKind,
    pub value: f64,
}

/// Tail TTFT per 256-token reasoning-length bin.
pub fn tail_ttft_bins(rows: &[(u64, f64)]) -> Vec<TailBin> {
    let mut groups: std::collections::BTreeMap<u64, Vec<f64>> = Default::default();
    for &(reasoning, ttft) in rows {
        groups.entry(reasoning / BIN_WIDTH).or_default().push(ttft);
    }
    groups
        .into_iter()
        .filter(|(_, v)| v.len() >= MIN_BIN_SAMPLES)
        .map(|(k, values)| {
            let values = sorted(values);
            let kind = StatKind::for_samples(values.len());
            TailBin {
                lo: k * BIN_WIDTH,
                hi: k * BIN_WIDTH + BIN_WIDTH - 1,
                samples: values.len(),
                kind,
                value: kind.apply(&values),
            }
        })
        .collect()
}

/// Output tokens per second over the span from first arrival to last completion.
pub fn throughput(records: &[RequestRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid(
            "records",
            "throughput of an empty run is undefined",
        ));
    }
    let tokens: u64 = records.iter().map(|r| r.spec.output_tokens()).sum();
    let start = records.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
    let end = records
        .iter()
        .map(|r| r.completion)
        .fold(f64::NEG_INFINITY, f64::max);
    if end <= start {
        return Err(Error::invalid("records", "zero-length run span"));
    }
    Ok(tokens as f64 / (end - start))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySummary {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
}

impl LatencySummary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v = sorted(values);
        if v.is_empty() {
            return None;
        }
        Some(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: nearest_rank(&v, 50.0),
            p90: nearest_rank(&v, 90.0),
            p95: nearest_rank(&v, 95.0),
            p99: nearest_rank(&v, 99.0),
        })
    }
}

/// Thresholds used to classify requests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SloTargets {
    pub target_tpot: f64,
    pub qoe_threshold: f64,
    pub ttfat_target: f64,
}

impl Default for SloTargets {
    fn default() -> Self {
        Self {
            target_tpot: 0.1,
            qoe_threshold: 0.95,
            ttfat_target: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub id: RequestId,
    pub reasoning_tokens: u64,
    pub answering_tokens: u64,
    pub ttft: f64,
    pub ttfat: f64,
    pub qoe: f64,
    pub slo_violated: bool,
    pub ttfat_met: bool,
    pub blocking_latency: f64,
}

impl MetricRow {
    pub fn of(record: &RequestRecord, targets: &SloTargets) -> Self {
        let q = qoe(record, targets.target_tpot);
        let first = ttfat(record);
        Self {
            id: record.id(),
            reasoning_tokens: record.spec.reasoning_tokens,
            answering_tokens: record.spec.answering_tokens,
            ttft: ttft(record),
            ttfat: first,
            qoe: q,
            slo_violated: q < targets.qoe_threshold,
            ttfat_met: first <= targets.ttfat_target,
            blocking_latency: blocking_latency(record),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<MetricRow>,
    pub ttft: LatencySummary,
    pub slo_violation_rate: f64,
    pub ttfat_attainment: f64,
    pub throughput: f64,
    pub blocking: LatencySummary,
    pub bins: Vec<TailBin>,
}

impl RunReport {
    pub fn from_records(records: &[RequestRecord], targets: &SloTargets) -> Result<Self> {
        let throughput = throughput(records)?;
        let mut rows: Vec<MetricRow> = records.iter().map(|r| MetricRow::of(r, targets)).collect();
        rows.sort_by_key(|r| r.id);
        let n = rows.len() as f64;
        let bin_rows: Vec<(u64, f64)> = rows.iter().map(|r| (r.reasoning_tokens, r.ttft)).collect();
        Ok(Self {
            ttft: LatencySummary::of(rows.iter().map(|r| r.ttft)).expect("non-empty"),
            slo_violation_rate: rows.iter().filter(|r| r.slo_violated).count() as f64 / n,
            ttfat_attainment: rows.iter().filter(|r| r.ttfat_met).count() as f64 / n,
            throughput,
            blocking: LatencySummary::of(rows.iter().map(|r| r.blocking_latency)).expect("non-empty"),
            bins: tail_ttft_bins(&bin_rows),
            rows,
        })
    }
}
