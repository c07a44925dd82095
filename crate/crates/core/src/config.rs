//! Run configuration: defaults, the `pascal-config-v1` key=value file, and
//! flag-over-file merging.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cluster::{Ablations, Policy};
use crate::error::{Error, Result};
use crate::instance::InstanceConfig;
use crate::kv;
use crate::metrics::SloTargets;

pub const CONFIG_FORMAT: &str = "pascal-config-v1";

/// Per-instance KV capacity, absolute or relative to the trace's peak demand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Capacity {
    Tokens(u64),
    /// Fraction of the peak per-instance KV footprint of an unconstrained
    /// run of the same trace.
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub instance_count: usize,
    pub capacity: Capacity,
    pub token_quantum: u64,
    pub demotion_threshold: u64,
    pub policy: Policy,
    pub ablations: Ablations,
    pub target_tpot: f64,
    pub ttfat_target: f64,
    pub qoe_threshold: f64,
    /// Expected tokens an answering request may lag before its instance
    /// reports unhealthy.
    pub health_slack: usize,
    pub profile: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            instance_count: 8,
            capacity: Capacity::Fraction(0.5),
            token_quantum: 500,
            demotion_threshold: 5000,
            policy: Policy::Pascal,
            ablations: Ablations::default(),
            target_tpot: 0.1,
            ttfat_target: 0.25,
            qoe_threshold: 0.95,
            health_slack: 0,
            profile: None,
            seed: 0,
        }
    }
}

/// Optional values layered on top of a config, e.g. from command-line flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub instance_count: Option<usize>,
    pub capacity: Option<Capacity>,
    pub token_quantum: Option<u64>,
    pub demotion_threshold: Option<u64>,
    pub policy: Option<Policy>,
    pub no_migration: Option<bool>,
    pub non_adaptive: Option<bool>,
    pub target_tpot: Option<f64>,
    pub ttfat_target: Option<f64>,
    pub qoe_threshold: Option<f64>,
    pub health_slack: Option<usize>,
    pub profile: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instance_count == 0 {
            return Err(Error::invalid("instance_count", "must be at least 1"));
        }
        match self.capacity {
            Capacity::Tokens(0) => return Err(Error::invalid("gpu_capacity", "must be at least 1")),
            Capacity::Fraction(f) if !(f.is_finite() && f > 0.0) => {
                return Err(Error::invalid(
                    "capacity_fraction",
                    format!("must be > 0, got {f}"),
                ))
            }
            _ => {}
        }
        if self.token_quantum == 0 {
            return Err(Error::invalid("token_quantum", "must be at least 1"));
        }
        if self.demotion_threshold == 0 {
            return Err(Error::invalid("demotion_threshold", "must be at least 1"));
        }
        for (name, v) in [
            ("target_tpot", self.target_tpot),
            ("ttfat_target", self.ttfat_target),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be > 0, got {v}")));
            }
        }
        if !(self.qoe_threshold > 0.0 && self.qoe_threshold <= 1.0) {
            return Err(Error::invalid(
                "qoe_threshold",
                format!("must lie in (0, 1], got {}", self.qoe_threshold),
            ));
        }
        Ok(())
    }

    pub fn slo_targets(&self) -> SloTargets {
        SloTargets {
            target_tpot: self.target_tpot,
            qoe_threshold: self.qoe_threshold,
            ttfat_target: self.ttfat_target,
        }
    }

    /// Instance parameters for a resolved per-instance capacity.
    pub fn instance_config(&self, gpu_capacity: u64) -> InstanceConfig {
        InstanceConfig {
            gpu_capacity,
            token_quantum: self.token_quantum,
            demotion_threshold: self.demotion_threshold,
            target_tpot: self.target_tpot,
            health_slack: self.health_slack,
            policy: self.policy,
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.instance_count {
            self.instance_count = v;
        }
        if let Some(v) = o.capacity {
            self.capacity = v;
        }
        if let Some(v) = o.token_quantum {
            self.token_quantum = v;
        }
        if let Some(v) = o.demotion_threshold {
            self.demotion_threshold = v;
        }
        if let Some(v) = o.policy {
            self.policy = v;
        }
        if let Some(v) = o.no_migration {
            self.ablations.no_migration = v;
        }
        if let Some(v) = o.non_adaptive {
            self.ablations.non_adaptive = v;
        }
        if let Some(v) = o.target_tpot {
            self.target_tpot = v;
        }
        if let Some(v) = o.ttfat_target {
            self.ttfat_target = v;
        }
        if let Some(v) = o.qoe_threshold {
            self.qoe_threshold = v;
        }
        if let Some(v) = o.health_slack {
            self.health_slack = v;
        }
        if let Some(v) = &o.profile {
            self.profile = Some(v.clone());
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
    }

    /// Parses a config file on top of the defaults. Relative profile paths
    /// resolve against `base_dir` when given.
    pub fn from_text(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut o = Overrides::default();
        let mut gpu_capacity = None;
        let mut fraction = None;
        for e in kv::parse(text, CONFIG_FORMAT)? {
            match e.key.as_str() {
                "instance_count" => o.instance_count = Some(e.parse_u64()? as usize),
                "gpu_capacity" => gpu_capacity = Some((e.line, e.parse_u64()?)),
                "capacity_fraction" => fraction = Some((e.line, e.parse_f64()?)),
                "token_quantum" => o.token_quantum = Some(e.parse_u64()?),
                "demotion_threshold" => o.demotion_threshold = Some(e.parse_u64()?),
                "policy" => {
                    o.policy = Some(
                        e.value
                            .parse()
                            .map_err(|err: Error| Error::parse(e.line, err.to_string()))?,
                    )
                }
                "no_migration" => o.no_migration = Some(e.parse_bool()?),
                "non_adaptive" => o.non_adaptive = Some(e.parse_bool()?),
                "target_tpot" => o.target_tpot = Some(e.parse_f64()?),
                "ttfat_target" => o.ttfat_target = Some(e.parse_f64()?),
                "qoe_threshold" => o.qoe_threshold = Some(e.parse_f64()?),
                "health_slack" => o.health_slack = Some(e.parse_u64()? as usize),
                "profile" => {
                    let p = PathBuf::from(&e.value);
                    o.profile = Some(match base_dir {
                        Some(dir) if p.is_relative() => dir.join(p),
                        _ => p,
                    });
                }
                "seed" => o.seed = Some(e.parse_u64()?),
                other => return Err(Error::parse(e.line, format!("unknown config key `{other}`"))),
            }
        }
        o.capacity = match (gpu_capacity, fraction) {
            (Some(_), Some((line, _))) => {
                return Err(Error::parse(
                    line,
                    "gpu_capacity and capacity_fraction are mutually exclusive",
                ))
            }
            (Some((_, t)), None) => Some(Capacity::Tokens(t)),
            (None, Some((_, f))) => Some(Capacity::Fraction(f)),
            (None, None) => None,
        };
        let mut config = Self::default();
        config.apply(&o);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&kv::read_to_string(path)?, path.parent())
    }

    /// Serializes every field; parsing the result yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = format!("{CONFIG_FORMAT}\n");
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        line("instance_count", self.instance_count.to_string());
        match self.capacity {
            Capacity::Tokens(t) => line("gpu_capacity", t.to_string()),
            Capacity::Fraction(f) => line("capacity_fraction", f.to_string()),
        }
        line("token_quantum", self.token_quantum.to_string());
        line("demotion_threshold", self.demotion_threshold.to_string());
        line("policy", self.policy.to_string());
        line("no_migration", self.ablations.no_migration.to_string());
        line("non_adaptive", self.ablations.non_adaptive.to_string());
        line("target_tpot", self.target_tpot.to_string());
        line("ttfat_target", self.ttfat_target.to_string());
        line("qoe_threshold", self.qoe_threshold.to_string());
        line("health_slack", self.health_slack.to_string());
        if let Some(p) = &self.profile {
            line("profile", p.display().to_string());
        }
        line("seed", self.seed.to_string());
        out
    }
}
