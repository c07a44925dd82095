//! `pascal-report-v1` output: `requests.csv`, `summary.txt`, `bins.csv`,
//! and side-by-side comparison of report directories.
//!
//! ```text
//! requests.csv  id,reasoning_tokens,answering_tokens,ttft,ttfat,qoe,slo_violated,blocking_latency,ttfat_met
//! summary.txt   key=value, including the resolved config as config.* keys
//! bins.csv      bin_lo,bin_hi,n,stat_kind,value
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::engine::RunStats;
use crate::error::{Error, Result};
use crate::kv::{self, format_seconds};
use crate::metrics::{nearest_rank, MetricRow, RunReport, StatKind, TailBin};
use crate::RequestId;

pub const REPORT_FORMAT: &str = "pascal-report-v1";
pub const REQUESTS_FILE: &str = "requests.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const BINS_FILE: &str = "bins.csv";
pub const EVENTS_FILE: &str = "events.csv";

const REQUESTS_HEADER: &str =
    "id,reasoning_tokens,answering_tokens,ttft,ttfat,qoe,slo_violated,blocking_latency,ttfat_met";
const BINS_HEADER: &str = "bin_lo,bin_hi,n,stat_kind,value";

pub fn requests_csv(report: &RunReport) -> String {
    let mut out = format!("{REPORT_FORMAT}\n{REQUESTS_HEADER}\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.id,
            r.reasoning_tokens,
            r.answering_tokens,
            format_seconds(r.ttft),
            format_seconds(r.ttfat),
            r.qoe,
            r.slo_violated,
            format_seconds(r.blocking_latency),
            r.ttfat_met
        );
    }
    out
}

pub fn bins_csv(bins: &[TailBin]) -> String {
    let mut out = format!("{REPORT_FORMAT}\n{BINS_HEADER}\n");
    for b in bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            b.lo,
            b.hi,
            b.samples,
            b.kind.as_str(),
            format_seconds(b.value)
        );
    }
    out
}

pub fn summary_txt(report: &RunReport, stats: &RunStats, config: &RunConfig) -> String {
    let mut out = format!("{REPORT_FORMAT}\n");
    for line in config.to_text().lines().skip(1) {
        let _ = writeln!(out, "config.{line}");
    }
    let mut put = |k: &str, v: String| {
        let _ = writeln!(out, "{k}={v}");
    };
    put("gpu_capacity_tokens", stats.gpu_capacity.to_string());
    put("requests", report.rows.len().to_string());
    put("ttft_mean", format_seconds(report.ttft.mean));
    put("ttft_p50", format_seconds(report.ttft.p50));
    put("ttft_p90", format_seconds(report.ttft.p90));
    put("ttft_p95", format_seconds(report.ttft.p95));
    put("ttft_p99", format_seconds(report.ttft.p99));
    put("slo_violation_rate", report.slo_violation_rate.to_string());
    put("ttfat_attainment", report.ttfat_attainment.to_string());
    put("throughput", report.throughput.to_string());
    put("blocking_p50", format_seconds(report.blocking.p50));
    put("blocking_p99", format_seconds(report.blocking.p99));
    put("preemptions", stats.preemptions.to_string());
    put("migrations", stats.migrations.to_string());
    let mut transfers = stats.transfer_latencies.clone();
    transfers.sort_by(f64::total_cmp);
    if !transfers.is_empty() {
        put("transfer_p50", format_seconds(nearest_rank(&transfers, 50.0)));
        put("transfer_p99", format_seconds(nearest_rank(&transfers, 99.0)));
    }
    put("events", stats.events.to_string());
    out
}

/// Writes the three report files (and the event log, if any) atomically.
pub fn write_report(
    dir: &Path,
    report: &RunReport,
    stats: &RunStats,
    config: &RunConfig,
    event_log: Option<&str>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    kv::write_atomic(&dir.join(REQUESTS_FILE), &requests_csv(report))?;
    kv::write_atomic(&dir.join(BINS_FILE), &bins_csv(&report.bins))?;
    if let Some(log) = event_log {
        kv::write_atomic(&dir.join(EVENTS_FILE), log)?;
    }
    kv::write_atomic(&dir.join(SUMMARY_FILE), &summary_txt(report, stats, config))
}

/// The parts of a report directory needed for comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedReport {
    pub label: String,
    /// `(id, reasoning_tokens, answering_tokens)` per request.
    pub requests: Vec<(RequestId, u64, u64)>,
    pub summary: BTreeMap<String, String>,
    pub bins: Vec<TailBin>,
}

impl LoadedReport {
    pub fn summary_f64(&self, key: &str) -> Result<f64> {
        let v = self
            .summary
            .get(key)
            .ok_or_else(|| Error::invalid(key, format!("missing from {}", self.label)))?;
        v.parse()
            .map_err(|_| Error::invalid(key, format!("`{v}` is not a number in {}", self.label)))
    }
}

fn csv_body<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim() == REPORT_FORMAT => {}
        _ => {
            return Err(Error::parse(
                1,
                format!("expected format header `{REPORT_FORMAT}`"),
            ))
        }
    }
    match lines.next() {
        Some((_, l)) if l.trim() == header => {}
        _ => return Err(Error::parse(2, format!("expected column header `{header}`"))),
    }
    Ok(lines.map(|(i, l)| (i + 1, l.split(',').map(str::trim).collect())))
}

fn field<T: std::str::FromStr>(cols: &[&str], idx: usize, line: usize) -> Result<T> {
    cols.get(idx)
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::parse(line, format!("bad or missing column {}", idx + 1)))
}

pub fn parse_requests_csv(text: &str) -> Result<Vec<(RequestId, u64, u64)>> {
    csv_body(text, REQUESTS_HEADER)?
        .map(|(line, cols)| {
            Ok((
                field(&cols, 0, line)?,
                field(&cols, 1, line)?,
                field(&cols, 2, line)?,
            ))
        })
        .collect()
}

pub fn parse_bins_csv(text: &str) -> Result<Vec<TailBin>> {
    csv_body(text, BINS_HEADER)?
        .map(|(line, cols)| {
            let kind = cols
                .get(3)
                .and_then(|k| StatKind::parse(k))
                .ok_or_else(|| Error::parse(line, "bad stat_kind"))?;
            Ok(TailBin {
                lo: field(&cols, 0, line)?,
                hi: field(&cols, 1, line)?,
                samples: field(&cols, 2, line)?,
                kind,
                value: field(&cols, 4, line)?,
            })
        })
        .collect()
}

pub fn load_report(dir: &Path) -> Result<LoadedReport> {
    let with_path = |file: &str, e: Error| match e {
        Error::Parse { line, message } => {
            Error::parse(line, format!("{}: {message}", dir.join(file).display()))
        }
        other => other,
    };
    let requests = parse_requests_csv(&kv::read_to_string(&dir.join(REQUESTS_FILE))?)
        .map_err(|e| with_path(REQUESTS_FILE, e))?;
    let bins =
        parse_bins_csv(&kv::read_to_string(&dir.join(BINS_FILE))?).map_err(|e| with_path(BINS_FILE, e))?;
    let summary = kv::parse(&kv::read_to_string(&dir.join(SUMMARY_FILE))?, REPORT_FORMAT)
        .map_err(|e| with_path(SUMMARY_FILE, e))?
        .into_iter()
        .map(|e| (e.key, e.value))
        .collect();
    Ok(LoadedReport {
        label: dir.display().to_string(),
        requests,
        summary,
        bins,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinDelta {
    pub lo: u64,
    pub hi: u64,
    pub baseline: f64,
    pub other: f64,
    /// `(baseline - other) / baseline`, in percent.
    pub reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub bins: Vec<BinDelta>,
    pub slo_rate_delta: f64,
    pub throughput_delta_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

fn reduction(baseline: f64, other: f64) -> f64 {
    if baseline == 0.0 {
        if other == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        (baseline - other) / baseline * 100.0
    }
}

/// `(other - baseline) / baseline`, in percent.
fn growth(baseline: f64, other: f64) -> f64 {
    if baseline == 0.0 {
        if other == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (other - baseline) / baseline * 100.0
    }
}

/// Compares every report against the first. All reports must describe the
/// same requests.
pub fn compare(reports: &[LoadedReport]) -> Result<Comparison> {
    let [base, others @ ..] = reports else {
        return Err(Error::Incomparable("need at least two reports".into()));
    };
    if others.is_empty() {
        return Err(Error::Incomparable("need at least two reports".into()));
    }
    let base_slo = base.summary_f64("slo_violation_rate")?;
    let base_tput = base.summary_f64("throughput")?;
    let mut rows = Vec::new();
    for other in others {
        if other.requests != base.requests {
            return Err(Error::Incomparable(format!(
                "{} and {} were produced from different traces",
                base.label, other.label
            )));
        }
        let other_bins: BTreeMap<u64, &TailBin> = other.bins.iter().map(|b| (b.lo, b)).collect();
        let bins = base
            .bins
            .iter()
            .filter_map(|b| {
                other_bins.get(&b.lo).map(|o| BinDelta {
                    lo: b.lo,
                    hi: b.hi,
                    baseline: b.value,
                    other: o.value,
                    reduction_pct: reduction(b.value, o.value),
                })
            })
            .collect();
        let tput = other.summary_f64("throughput")?;
        rows.push(ComparisonRow {
            label: other.label.clone(),
            bins,
            slo_rate_delta: other.summary_f64("slo_violation_rate")? - base_slo,
            throughput_delta_pct: growth(base_tput, tput),
        });
    }
    Ok(Comparison {
        baseline: base.label.clone(),
        rows,
    })
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let mut out = format!("baseline={}\n", self.baseline);
        for row in &self.rows {
            let _ = writeln!(out, "\nreport={}", row.label);
            let _ = writeln!(out, "slo_violation_rate_delta={}", row.slo_rate_delta);
            let _ = writeln!(out, "throughput_delta_pct={:.3}", row.throughput_delta_pct);
            let _ = writeln!(out, "bin_lo,bin_hi,baseline_tail_ttft,tail_ttft,reduction_pct");
            for b in &row.bins {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:.3}",
                    b.lo,
                    b.hi,
                    format_seconds(b.baseline),
                    format_seconds(b.other),
                    b.reduction_pct
                );
            }
        }
        out
    }
}

/// Convenience for callers that hold rows rather than a full report.
pub fn rows_by_id(rows: &[MetricRow]) -> BTreeMap<RequestId, &MetricRow> {
    rows.iter().map(|r| (r.id, r)).collect()
}
