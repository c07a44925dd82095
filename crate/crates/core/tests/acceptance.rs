//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::qoe::step_integration_qoe;
use common::selection::for_each_vector;
use pascal_core::cluster::{select_instance_answering, select_instance_reasoning, Ablations, Policy};
use pascal_core::config::{Capacity, RunConfig};
use pascal_core::engine::{resolve_capacity, run, run_with_log, RunOutput, Simulation};
use pascal_core::metrics::{
    nearest_rank, qoe, qoe_from_deliveries, ttfat, ttft, RequestRecord, RunReport, SloTargets, TailBin,
};
use pascal_core::report::{bins_csv, requests_csv, summary_txt};
use pascal_core::workload::{generate_trace, presets};
use pascal_core::{LatencyProfile, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DECODE_STEP: f64 = 0.03;

/// Characterization runs: one instance, 300 requests at 5 req/s, which
/// gives an instance budget of tens of thousands of KV tokens.
const CHARACTERIZATION_RATE: f64 = 5.0;
const CHARACTERIZATION_SEED: u64 = 7;

/// Mixed-trace runs: eight instances, 500 requests at 1 req/s. Every
/// baseline preempts hundreds of times at half the oracle's peak memory.
const MIXED_RATE: f64 = 1.0;
const MIXED_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn check(&mut self, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let mut out = f();
        let elapsed = start.elapsed();
        if elapsed > budget {
            out.pass = false;
            out.detail.push_str(&format!("; over budget {budget:?}"));
        }
        if !out.pass {
            self.failures += 1;
        }
        println!(
            "{} {name} ({:.2?}): {}",
            if out.pass { "PASS" } else { "FAIL" },
            elapsed,
            out.detail
        );
    }
}

fn all(parts: &[(bool, String)]) -> Outcome {
    let pass = parts.iter().all(|(ok, _)| *ok);
    let detail = parts
        .iter()
        .map(|(ok, d)| format!("{}{d}", if *ok { "" } else { "[x] " }))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::new(pass, detail)
}

fn golden_timelines() -> Outcome {
    let oracle = common::run_three_requests(Policy::Oracle);
    let fcfs = common::run_three_requests(Policy::Fcfs);
    let rr = common::run_three_requests(Policy::RoundRobin);
    let (a, b, c) = (&rr.records[0], &rr.records[1], &rr.records[2]);
    let c_tokens_by_8 = c.token_times.iter().filter(|&&t| t <= 8.0).count();
    all(&[
        (
            oracle.stats.preemptions == 0 && oracle.records.iter().all(|r| r.first_admission == r.arrival),
            format!("oracle preemptions={}", oracle.stats.preemptions),
        ),
        (
            ttft(&fcfs.records[2]) == 7.0,
            format!("fcfs C ttft={}", ttft(&fcfs.records[2])),
        ),
        (
            a.preemption_intervals.first().map(|p| p.0) == Some(4.0),
            format!("rr A preempted at {:?}", a.preemption_intervals.first()),
        ),
        (ttft(c) == 3.0, format!("rr C first token +{}", ttft(c))),
        (
            b.preemption_intervals == vec![(5.0, 8.0)],
            format!("rr B preempted {:?}", b.preemption_intervals),
        ),
        (
            c.preemption_intervals.first().map(|p| p.0) == Some(8.0) && c_tokens_by_8 == 4,
            format!(
                "rr C preempted at {:?} after {c_tokens_by_8} tokens",
                c.preemption_intervals.first()
            ),
        ),
    ])
}

fn selection_conformance() -> Outcome {
    let mut mismatches = 0u64;
    let visited = for_each_vector(|s, (r, a)| {
        if select_instance_reasoning(s) != r || select_instance_answering(s) != a {
            mismatches += 1;
        }
    });
    let expected = 128 + 128u64.pow(2) + 128u64.pow(3) + 128u64.pow(4);
    Outcome::new(
        mismatches == 0 && visited == expected,
        format!("{visited} snapshot vectors, {mismatches} mismatches"),
    )
}

/// Five equal-width bins over 128..=2048.
fn length_bin(tokens: u64) -> usize {
    ((tokens.max(128) - 128) / 384).min(4) as usize
}

fn bin_means(values: impl Iterator<Item = (u64, f64)>) -> [f64; 5] {
    let mut sum = [0.0; 5];
    let mut n = [0usize; 5];
    for (tokens, v) in values {
        let b = length_bin(tokens);
        sum[b] += v;
        n[b] += 1;
    }
    std::array::from_fn(|i| sum[i] / n[i] as f64)
}

fn characterization_config(policy: Policy) -> RunConfig {
    RunConfig {
        instance_count: 1,
        capacity: Capacity::Fraction(0.5),
        policy,
        ..RunConfig::default()
    }
}

fn fmt_bins(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn reasoning_characterization() -> Outcome {
    let profile = LatencyProfile::default();
    let trace = generate_trace(
        &presets::reasoning_characterization(300, CHARACTERIZATION_RATE),
        CHARACTERIZATION_SEED,
    )
    .unwrap();
    let closed = |r: &RequestRecord| {
        profile.prefill_latency(r.spec.prompt_tokens) + r.spec.reasoning_tokens as f64 * DECODE_STEP
    };
    let normalized = |out: &RunOutput| {
        bin_means(
            out.records
                .iter()
                .map(|r| (r.spec.reasoning_tokens, (r.reasoning_end - r.arrival) / closed(r))),
        )
    };
    let oracle = run(&trace, &characterization_config(Policy::Oracle), &profile, 0).unwrap();
    let fcfs = run(&trace, &characterization_config(Policy::Fcfs), &profile, 0).unwrap();
    let rr = run(&trace, &characterization_config(Policy::RoundRobin), &profile, 0).unwrap();

    // An uninterrupted request can still wait for the iteration in flight
    // when it arrives and when its prefill lands: at most two decode steps.
    let excess: Vec<f64> = oracle
        .records
        .iter()
        .map(|r| (r.reasoning_end - r.arrival) - closed(r))
        .collect();
    let worst = excess.iter().copied().fold(0.0, f64::max);
    let oracle_ok = excess
        .iter()
        .all(|e| (-1e-9..=2.0 * DECODE_STEP + 1e-9).contains(e));

    let (f, r) = (normalized(&fcfs), normalized(&rr));
    all(&[
        (
            oracle_ok,
            format!(
                "oracle within closed form +{worst:.3}s, bins {}",
                fmt_bins(&normalized(&oracle))
            ),
        ),
        (
            f[0] > r[0],
            format!("shortest bin fcfs {:.3} > rr {:.3}", f[0], r[0]),
        ),
        (r[4] > 1.3, format!("rr longest bin {:.3} > 1.3", r[4])),
        (r[4] > r[0], format!("rr rises {}", fmt_bins(&r))),
        (f[4] < f[0], format!("fcfs falls {}", fmt_bins(&f))),
    ])
}

/// Answering SLO: paced QoE meets the threshold and the first answer
/// arrives within the TTFAT target.
fn attains(r: &RequestRecord, t: &SloTargets) -> bool {
    qoe(r, t.target_tpot) >= t.qoe_threshold && ttfat(r) <= t.ttfat_target
}

fn answering_characterization() -> Outcome {
    let profile = LatencyProfile::default();
    let targets = SloTargets::default();
    let trace = generate_trace(
        &presets::answering_characterization(300, CHARACTERIZATION_RATE),
        CHARACTERIZATION_SEED,
    )
    .unwrap();
    let attainment = |policy| {
        let out = run(&trace, &characterization_config(policy), &profile, 0).unwrap();
        let bins = bin_means(
            out.records
                .iter()
                .map(|r| (r.spec.answering_tokens, f64::from(u8::from(attains(r, &targets))))),
        );
        let overall =
            out.records.iter().filter(|r| attains(r, &targets)).count() as f64 / out.records.len() as f64;
        (bins, overall)
    };
    let (f, f_all) = attainment(Policy::Fcfs);
    let (r, r_all) = attainment(Policy::RoundRobin);
    all(&[
        (
            r.iter().zip(&f).all(|(r, f)| r >= f),
            format!("per bin rr {} vs fcfs {}", fmt_bins(&r), fmt_bins(&f)),
        ),
        (r_all >= 0.95, format!("rr overall {r_all:.3} (fcfs {f_all:.3})")),
    ])
}

struct MixedRuns {
    median_reasoning: u64,
    fcfs: RunReport,
    rr: RunReport,
    pascal: RunReport,
    pascal_transfers: Vec<f64>,
    no_migration: RunReport,
    non_adaptive: RunReport,
}

fn mixed_runs() -> MixedRuns {
    let profile = LatencyProfile::default();
    let targets = SloTargets::default();
    let trace = presets::mixed(500, MIXED_RATE, 0.5, MIXED_SEED).unwrap();
    let mut reasoning: Vec<u64> = trace.iter().map(|r| r.reasoning_tokens).collect();
    reasoning.sort_unstable();
    let go = |policy, ablations| {
        let config = RunConfig {
            policy,
            ablations,
            capacity: Capacity::Fraction(0.5),
            ..RunConfig::default()
        };
        let out = run(&trace, &config, &profile, 0).unwrap();
        let report = RunReport::from_records(&out.records, &targets).unwrap();
        (report, out.stats.transfer_latencies)
    };
    let (pascal, pascal_transfers) = go(Policy::Pascal, Ablations::default());
    MixedRuns {
        median_reasoning: reasoning[reasoning.len() / 2],
        fcfs: go(Policy::Fcfs, Ablations::default()).0,
        rr: go(Policy::RoundRobin, Ablations::default()).0,
        pascal,
        pascal_transfers,
        no_migration: go(
            Policy::Pascal,
            Ablations {
                no_migration: true,
                non_adaptive: false,
            },
        )
        .0,
        non_adaptive: go(
            Policy::Pascal,
            Ablations {
                no_migration: false,
                non_adaptive: true,
            },
        )
        .0,
    }
}

fn bin_at(bins: &[TailBin], lo: u64) -> Option<f64> {
    bins.iter().find(|b| b.lo == lo).map(|b| b.value)
}

fn end_to_end(m: &MixedRuns) -> Outcome {
    let mut worst_ok = true;
    let mut best_cut = f64::NEG_INFINITY;
    let mut cells = Vec::new();
    for b in m.pascal.bins.iter().filter(|b| b.hi <= m.median_reasoning) {
        let Some(base) = bin_at(&m.fcfs.bins, b.lo) else {
            continue;
        };
        worst_ok &= b.value <= base;
        if base > 0.0 {
            best_cut = best_cut.max((base - b.value) / base);
        }
        cells.push(format!("{}:{:.1}/{:.1}", b.lo, b.value, base));
    }
    let gap = |base: f64| (m.pascal.throughput - base).abs() / base;
    let (gap_fcfs, gap_rr) = (gap(m.fcfs.throughput), gap(m.rr.throughput));
    all(&[
        (
            worst_ok && !cells.is_empty(),
            format!(
                "tail ttft pascal/fcfs below median {} [{}]",
                m.median_reasoning,
                cells.join(" ")
            ),
        ),
        (
            best_cut >= 0.30,
            format!("best reduction {:.1}%", best_cut * 100.0),
        ),
        (
            m.pascal.slo_violation_rate <= m.rr.slo_violation_rate,
            format!(
                "slo violations pascal {:.3} vs rr {:.3}",
                m.pascal.slo_violation_rate, m.rr.slo_violation_rate
            ),
        ),
        (
            gap_fcfs <= 0.05 && gap_rr <= 0.05,
            format!(
                "throughput pascal {:.1} fcfs {:.1} ({:.1}%) rr {:.1} ({:.1}%)",
                m.pascal.throughput,
                m.fcfs.throughput,
                gap_fcfs * 100.0,
                m.rr.throughput,
                gap_rr * 100.0
            ),
        ),
    ])
}

fn ablations(m: &MixedRuns) -> Outcome {
    let (nm, p) = (m.no_migration.blocking.p99, m.pascal.blocking.p99);
    all(&[
        (
            nm >= 5.0 * p,
            format!("p99 blocking no-migration {nm:.2}s vs pascal {p:.2}s"),
        ),
        (
            m.non_adaptive.slo_violation_rate >= m.pascal.slo_violation_rate,
            format!(
                "slo violations non-adaptive {:.3} vs pascal {:.3}",
                m.non_adaptive.slo_violation_rate, m.pascal.slo_violation_rate
            ),
        ),
    ])
}

fn transfer_scale(m: &MixedRuns) -> Outcome {
    let mut t = m.pascal_transfers.clone();
    if t.is_empty() {
        return Outcome::new(false, "no migrations happened");
    }
    t.sort_by(f64::total_cmp);
    let p99 = nearest_rank(&t, 99.0);
    let ttft_p50 = m.pascal.ttft.p50;
    Outcome::new(
        p99 < 0.05 * ttft_p50,
        format!("{} transfers, p99 {p99:.3}s vs ttft p50 {ttft_p50:.2}s", t.len()),
    )
}

/// Random delivery times: mostly near the target pace with occasional
/// stalls.
fn random_deliveries(rng: &mut ChaCha8Rng, tpot: f64) -> Vec<f64> {
    let n = rng.random_range(1..=32);
    let mut t = rng.random_range(0.0..10.0);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(t);
        t += if rng.random_bool(0.8) {
            rng.random_range(0.0..=1.2 * tpot)
        } else {
            rng.random_range(0.0..=10.0 * tpot)
        };
    }
    out
}

fn qoe_suite() -> Outcome {
    let tpot = 0.1;
    let on_time: Vec<f64> = (0..20).map(|k| 3.0 + k as f64 * tpot).collect();
    let worked = [0.0, 1.0, 2.0, 5.0];
    let oracle = step_integration_qoe(&worked, 1.0);
    let fast = qoe_from_deliveries(&worked, 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut out_of_range, mut increases, mut worst, mut disagreements) = (0, 0, 0.0f64, 0);
    for _ in 0..1000 {
        let before = random_deliveries(&mut rng, tpot);
        let q0 = qoe_from_deliveries(&before, tpot);
        let mut after = before.clone();
        if after.len() > 1 {
            let k = rng.random_range(1..after.len());
            let d = after[k] + rng.random_range(f64::EPSILON..=5.0 * tpot);
            for x in &mut after[k..] {
                *x = x.max(d);
            }
        }
        let q1 = qoe_from_deliveries(&after, tpot);
        for (q, d) in [(q0, &before), (q1, &after)] {
            if (q - step_integration_qoe(d, tpot).min(1.0)).abs() > 1e-9 {
                disagreements += 1;
            }
        }
        for q in [q0, q1] {
            if !(0.0..=1.0).contains(&q) {
                out_of_range += 1;
            }
        }
        if q1 > q0 + 1e-12 {
            increases += 1;
            worst = worst.max(q1 - q0);
        }
    }
    all(&[
        (
            qoe_from_deliveries(&on_time, tpot) == 1.0,
            "on-time delivery QoE=1".to_string(),
        ),
        (
            (oracle - 6.0 / 7.0).abs() < 1e-9 && (fast - 6.0 / 7.0).abs() < 1e-9,
            format!("worked case {fast:.12} (step integration {oracle:.12})"),
        ),
        (out_of_range == 0, format!("{out_of_range} values outside [0,1]")),
        (
            disagreements == 0,
            format!("{disagreements} disagreements with step integration"),
        ),
        (
            increases == 0,
            format!("{increases}/1000 single-token delays raised QoE (largest +{worst:.4})"),
        ),
    ])
}

fn report_bytes(
    trace: &Trace,
    config: &RunConfig,
    profile: &LatencyProfile,
) -> (String, String, String, String) {
    let out = run_with_log(trace, config, profile, config.seed, true).unwrap();
    let report = RunReport::from_records(&out.records, &config.slo_targets()).unwrap();
    (
        requests_csv(&report),
        bins_csv(&report.bins),
        summary_txt(&report, &out.stats, config),
        out.event_log.unwrap_or_default(),
    )
}

fn determinism_and_census() -> Outcome {
    let profile = LatencyProfile::default();
    let seed = 31;
    let trace = presets::mixed(200, 6.0, 0.3, seed).unwrap();
    let mut parts = Vec::new();
    for policy in Policy::ALL {
        let config = RunConfig {
            instance_count: 3,
            capacity: Capacity::Fraction(0.5),
            token_quantum: 100,
            demotion_threshold: 2000,
            policy,
            seed,
            ..RunConfig::default()
        };
        let identical = report_bytes(&trace, &config, &profile) == report_bytes(&trace, &config, &profile);

        let capacity = resolve_capacity(&trace, &config, &profile).unwrap();
        let mut sim = Simulation::new(&trace, &config, &profile, capacity, false).unwrap();
        let (mut events, mut census_ok) = (0u64, true);
        while sim.step().unwrap() {
            events += 1;
            let live = sim.census();
            let arrived = trace.iter().filter(|r| r.arrival_time <= sim.clock()).count();
            census_ok &= live.windows(2).all(|w| w[0] < w[1]) && live.len() + sim.records().len() == arrived;
        }
        census_ok &= sim.records().len() == trace.len();
        parts.push((
            identical && census_ok,
            format!("{policy}: identical={identical} census={census_ok} over {events} events"),
        ));
    }
    all(&parts)
}

fn main() {
    let mut suite = Suite { failures: 0 };
    suite.check("1 golden timelines", Duration::from_secs(1), golden_timelines);
    suite.check(
        "2 selection conformance",
        Duration::from_secs(10),
        selection_conformance,
    );
    suite.check(
        "3 reasoning characterization",
        Duration::from_secs(60),
        reasoning_characterization,
    );
    suite.check(
        "4 answering characterization",
        Duration::from_secs(60),
        answering_characterization,
    );

    let start = Instant::now();
    let mixed = mixed_runs();
    let mixed_time = start.elapsed();
    suite.check(
        "5 end-to-end dominance",
        Duration::from_secs(300).saturating_sub(mixed_time),
        || end_to_end(&mixed),
    );
    suite.check(
        "6 ablation directionality",
        Duration::from_secs(300).saturating_sub(mixed_time),
        || ablations(&mixed),
    );
    suite.check(
        "9 transfer scale",
        Duration::from_secs(300).saturating_sub(mixed_time),
        || transfer_scale(&mixed),
    );
    suite.check("7 qoe suite", Duration::from_secs(10), qoe_suite);
    suite.check(
        "8 determinism and census",
        Duration::from_secs(60),
        determinism_and_census,
    );

    println!("mixed-trace runs took {mixed_time:.2?}");
    if suite.failures > 0 {
        println!("{} criteria failed", suite.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
