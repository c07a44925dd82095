//! Command-line front end: trace generation, single runs, sweeps and report
//! comparison.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use pascal_core::cluster::{Ablations, Policy};
use pascal_core::config::{Capacity, Overrides, RunConfig};
use pascal_core::engine::run_with_log;
use pascal_core::kv;
use pascal_core::report::{compare, load_report, write_report};
use pascal_core::workload::{self, presets, TraceParams};
use pascal_core::{Error, LatencyProfile, Result, RunReport, Trace};

#[derive(Debug, Parser)]
#[command(name = "pascal", version, about = "Serving-cluster scheduling simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trace.
    Gen(GenArgs),
    /// Simulate one trace under one configuration and write a report.
    Run(RunArgs),
    /// Run a grid of arrival rates, capacities, seeds and policy variants.
    Sweep(SweepArgs),
    /// Compare report directories against the first one.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 300 requests, prompt 128, reasoning uniform 128..=2048, one answer token.
    ReasoningCharacterization,
    /// 300 requests with a preloaded 128-token prefix, answering uniform 128..=2048.
    AnsweringCharacterization,
    Chat,
    Heavy,
    /// Chat trace with `--fraction` of requests given reasoning-heavy lengths.
    Mixed,
}

impl Preset {
    fn default_count(self) -> usize {
        match self {
            Preset::ReasoningCharacterization | Preset::AnsweringCharacterization => 300,
            _ => 500,
        }
    }

    fn params(self, count: usize, rate: f64) -> Option<TraceParams> {
        Some(match self {
            Preset::ReasoningCharacterization => presets::reasoning_characterization(count, rate),
            Preset::AnsweringCharacterization => presets::answering_characterization(count, rate),
            Preset::Chat => presets::chat(count, rate),
            Preset::Heavy => presets::reasoning_heavy(count, rate),
            Preset::Mixed => return None,
        })
    }

    pub fn generate(self, count: Option<usize>, rate: f64, fraction: f64, seed: u64) -> Result<Trace> {
        let count = count.unwrap_or_else(|| self.default_count());
        match self.params(count, rate) {
            Some(p) => workload::generate_trace(&p, seed),
            None => presets::mixed(count, rate, fraction, seed),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    /// Poisson arrival rate, requests per second.
    #[arg(long)]
    pub rate: f64,
    /// Number of requests (default 300 for characterization presets, else 500).
    #[arg(long)]
    pub count: Option<usize>,
    /// Share of reasoning-heavy requests in the mixed preset.
    #[arg(long, default_value_t = 0.5)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Config values settable from the command line; each one wins over the
/// config file.
#[derive(Debug, Default, Args)]
pub struct ConfigFlags {
    /// Key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<Policy>,
    /// Keep every request on its first instance.
    #[arg(long)]
    pub no_migration: bool,
    /// Migrate at every phase transition regardless of free memory.
    #[arg(long)]
    pub non_adaptive: bool,
    /// Per-instance KV capacity as a fraction of the unconstrained peak.
    #[arg(long, conflicts_with = "gpu_capacity")]
    pub capacity_fraction: Option<f64>,
    /// Per-instance KV capacity in tokens.
    #[arg(long)]
    pub gpu_capacity: Option<u64>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub token_quantum: Option<u64>,
    #[arg(long)]
    pub demotion_threshold: Option<u64>,
    #[arg(long)]
    pub target_tpot: Option<f64>,
    #[arg(long)]
    pub ttfat_target: Option<f64>,
    #[arg(long)]
    pub qoe_threshold: Option<f64>,
    #[arg(long)]
    pub health_slack: Option<usize>,
    /// Latency profile file; the built-in profile otherwise.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigFlags {
    pub fn overrides(&self) -> Overrides {
        let capacity = match (self.capacity_fraction, self.gpu_capacity) {
            (Some(f), _) => Some(Capacity::Fraction(f)),
            (None, Some(t)) => Some(Capacity::Tokens(t)),
            (None, None) => None,
        };
        Overrides {
            instance_count: self.instances,
            capacity,
            token_quantum: self.token_quantum,
            demotion_threshold: self.demotion_threshold,
            policy: self.policy,
            no_migration: self.no_migration.then_some(true),
            non_adaptive: self.non_adaptive.then_some(true),
            target_tpot: self.target_tpot,
            ttfat_target: self.ttfat_target,
            qoe_threshold: self.qoe_threshold,
            health_slack: self.health_slack,
            profile: self.profile.clone(),
            seed: self.seed,
        }
    }

    /// Defaults, then the config file, then the flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        config.apply(&self.overrides());
        config.validate()?;
        Ok(config)
    }
}

fn parse_policy(s: &str) -> std::result::Result<Policy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub flags: ConfigFlags,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also write the event log.
    #[arg(long)]
    pub events: bool,
}

/// A policy plus ablation switches, named for sweep output directories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Fcfs,
    Rr,
    Oracle,
    Pascal,
    PascalNoMigration,
    PascalNonAdaptive,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Fcfs => "fcfs",
            Variant::Rr => "rr",
            Variant::Oracle => "oracle",
            Variant::Pascal => "pascal",
            Variant::PascalNoMigration => "pascal-no-migration",
            Variant::PascalNonAdaptive => "pascal-non-adaptive",
        }
    }

    fn apply(self, config: &mut RunConfig) {
        config.ablations = Ablations::default();
        config.policy = match self {
            Variant::Fcfs => Policy::Fcfs,
            Variant::Rr => Policy::RoundRobin,
            Variant::Oracle => Policy::Oracle,
            Variant::Pascal | Variant::PascalNoMigration | Variant::PascalNonAdaptive => Policy::Pascal,
        };
        config.ablations.no_migration = self == Variant::PascalNoMigration;
        config.ablations.non_adaptive = self == Variant::PascalNonAdaptive;
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub preset: Preset,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub fraction: f64,
    /// Arrival rates in requests per second. The presets carry no notion of
    /// low or high load; choose rates relative to the trace.
    #[arg(long, value_delimiter = ',', required = true)]
    pub rates: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub capacity_fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "fcfs,rr,pascal")]
    pub variants: Vec<Variant>,
    /// Base config file; the sweep axes override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Report directories; the first is the baseline.
    #[arg(required = true, num_args = 2..)]
    pub reports: Vec<PathBuf>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn load_profile(path: Option<&Path>) -> Result<LatencyProfile> {
    match path {
        Some(p) => LatencyProfile::load(p),
        None => Ok(LatencyProfile::default()),
    }
}

pub fn cmd_gen(args: &GenArgs) -> Result<String> {
    let trace = args
        .preset
        .generate(args.count, args.rate, args.fraction, args.seed)?;
    workload::save_trace(&trace, &args.out)?;
    Ok(format!(
        "wrote {} requests to {}\n",
        trace.len(),
        args.out.display()
    ))
}

/// Runs one simulation and writes its report into `out_dir`.
pub fn simulate_into(
    trace: &Trace,
    config: &RunConfig,
    profile: &LatencyProfile,
    out_dir: &Path,
    events: bool,
) -> Result<RunReport> {
    let out = run_with_log(trace, config, profile, config.seed, events)?;
    let report = RunReport::from_records(&out.records, &config.slo_targets())?;
    write_report(out_dir, &report, &out.stats, config, out.event_log.as_deref())?;
    Ok(report)
}

fn summary_line(report: &RunReport) -> String {
    format!(
        "requests={} ttft_p50={:.3} ttft_p99={:.3} slo_violation_rate={:.4} throughput={:.2}",
        report.rows.len(),
        report.ttft.p50,
        report.ttft.p99,
        report.slo_violation_rate,
        report.throughput
    )
}

pub fn cmd_run(args: &RunArgs) -> Result<String> {
    let config = args.flags.resolve()?;
    let trace = workload::load_trace(&args.trace)?;
    let profile = load_profile(config.profile.as_deref())?;
    let report = simulate_into(&trace, &config, &profile, &args.out_dir, args.events)?;
    Ok(format!(
        "{}\nreport in {}\n",
        summary_line(&report),
        args.out_dir.display()
    ))
}

const SWEEP_FILE: &str = "sweep.csv";
const SWEEP_HEADER: &str =
    "rate,capacity_fraction,seed,variant,ttft_p50,ttft_p99,slo_violation_rate,ttfat_attainment,throughput,blocking_p99";

struct SweepPoint {
    rate: f64,
    fraction: f64,
    seed: u64,
    variant: Variant,
}

impl SweepPoint {
    fn dir(&self, root: &Path) -> PathBuf {
        root.join(format!(
            "rate-{}_cap-{}_seed-{}",
            self.rate, self.fraction, self.seed
        ))
        .join(self.variant.name())
    }
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<String> {
    let mut base = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &args.profile {
        base.profile = Some(p.clone());
    }
    let profile = load_profile(base.profile.as_deref())?;

    let mut points = Vec::new();
    for &rate in &args.rates {
        for &fraction in &args.capacity_fractions {
            for &seed in &args.seeds {
                for &variant in &args.variants {
                    points.push(SweepPoint {
                        rate,
                        fraction,
                        seed,
                        variant,
                    });
                }
            }
        }
    }

    let work = || -> Result<Vec<String>> {
        points
            .par_iter()
            .map(|p| {
                let trace = args.preset.generate(args.count, p.rate, args.fraction, p.seed)?;
                let mut config = base.clone();
                config.capacity = Capacity::Fraction(p.fraction);
                config.seed = p.seed;
                p.variant.apply(&mut config);
                config.validate()?;
                let dir = p.dir(&args.out_dir);
                let report = simulate_into(&trace, &config, &profile, &dir, false)?;
                Ok(format!(
                    "{},{},{},{},{},{},{},{},{},{}",
                    p.rate,
                    p.fraction,
                    p.seed,
                    p.variant.name(),
                    report.ttft.p50,
                    report.ttft.p99,
                    report.slo_violation_rate,
                    report.ttfat_attainment,
                    report.throughput,
                    report.blocking.p99
                ))
            })
            .collect()
    };
    let rows = match args.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidParameter {
                field: "jobs".into(),
                reason: e.to_string(),
            })?
            .install(work)?,
        None => work()?,
    };

    let mut table = format!("{SWEEP_HEADER}\n");
    for row in &rows {
        let _ = writeln!(table, "{row}");
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::Io {
        path: args.out_dir.clone(),
        source: e,
    })?;
    kv::write_atomic(&args.out_dir.join(SWEEP_FILE), &table)?;
    Ok(table)
}

pub fn cmd_compare(args: &CompareArgs) -> Result<String> {
    let reports = args
        .reports
        .iter()
        .map(|d| load_report(d))
        .collect::<Result<Vec<_>>>()?;
    let text = compare(&reports)?.to_text();
    match &args.out {
        Some(path) => {
            kv::write_atomic(path, &text)?;
            Ok(format!("wrote {}\n", path.display()))
        }
        None => Ok(text),
    }
}

pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compare(a) => cmd_compare(a),
    }
}
