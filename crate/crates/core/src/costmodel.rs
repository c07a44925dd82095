//! Analytic latency model standing in for profiled GPU timings.
//!
//! All KV quantities are counted in tokens. Decode-step latency is affine in
//! the batch size and the batch's resident KV; swaps and fabric transfers are
//! bandwidth terms.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kv;

pub const PROFILE_FORMAT: &str = "pascal-profile-v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyProfile {
    pub prefill_base: f64,
    pub prefill_per_token: f64,
    pub decode_base: f64,
    pub decode_per_request: f64,
    pub decode_per_kv_token: f64,
    /// GPU<->CPU KV tokens per second.
    pub swap_bandwidth: f64,
    /// Inter-instance KV tokens per second on one link.
    pub fabric_bandwidth: f64,
    /// Fixed cost per transfer, seconds.
    pub fabric_latency: f64,
}

impl Default for LatencyProfile {
    /// Flat 30 ms decode step; a 2048-token KV transfer takes 40 ms on an
    /// idle link.
    fn default() -> Self {
        Self {
            prefill_base: 0.01,
            prefill_per_token: 0.0001,
            decode_base: 0.03,
            decode_per_request: 0.0,
            decode_per_kv_token: 0.0,
            swap_bandwidth: 204_800.0,
            fabric_bandwidth: 51_200.0,
            fabric_latency: 0.0,
        }
    }
}

impl LatencyProfile {
    /// Unit-time profile for hand-traced timelines: every prefill and decode
    /// step takes exactly one time unit, swaps and transfers are free.
    pub fn unit_steps() -> Self {
        Self {
            prefill_base: 1.0,
            prefill_per_token: 0.0,
            decode_base: 1.0,
            decode_per_request: 0.0,
            decode_per_kv_token: 0.0,
            swap_bandwidth: f64::INFINITY,
            fabric_bandwidth: f64::INFINITY,
            fabric_latency: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("prefill_base", self.prefill_base),
            ("prefill_per_token", self.prefill_per_token),
            ("decode_base", self.decode_base),
            ("decode_per_request", self.decode_per_request),
            ("decode_per_kv_token", self.decode_per_kv_token),
            ("fabric_latency", self.fabric_latency),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("swap_bandwidth", self.swap_bandwidth),
            ("fabric_bandwidth", self.fabric_bandwidth),
        ] {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::invalid(name, format!("must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn prefill_latency(&self, prompt_tokens: u64) -> f64 {
        self.prefill_base + self.prefill_per_token * prompt_tokens as f64
    }

    /// One decode iteration; every batched request emits one token.
    pub fn decode_step_latency(&self, batch_size: usize, total_kv_tokens: u64) -> f64 {
        self.decode_base
            + self.decode_per_request * batch_size as f64
            + self.decode_per_kv_token * total_kv_tokens as f64
    }

    /// Same cost in either direction.
    pub fn swap_latency(&self, kv_tokens: u64) -> f64 {
        kv_tokens as f64 / self.swap_bandwidth
    }

    /// Cost of one transfer with exclusive use of the link.
    pub fn transfer_latency(&self, kv_tokens: u64) -> f64 {
        self.fabric_latency + kv_tokens as f64 / self.fabric_bandwidth
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(PROFILE_FORMAT);
        out.push('\n');
        for (k, v) in self.fields() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("prefill_base", self.prefill_base),
            ("prefill_per_token", self.prefill_per_token),
            ("decode_base", self.decode_base),
            ("decode_per_request", self.decode_per_request),
            ("decode_per_kv_token", self.decode_per_kv_token),
            ("swap_bandwidth", self.swap_bandwidth),
            ("fabric_bandwidth", self.fabric_bandwidth),
            ("fabric_latency", self.fabric_latency),
        ]
    }

    /// Parses a profile file. Keys that are absent keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut profile = Self::default();
        for entry in kv::parse(text, PROFILE_FORMAT)? {
            let v = entry.parse_f64()?;
            let slot = match entry.key.as_str() {
                "prefill_base" => &mut profile.prefill_base,
                "prefill_per_token" => &mut profile.prefill_per_token,
                "decode_base" => &mut profile.decode_base,
                "decode_per_request" => &mut profile.decode_per_request,
                "decode_per_kv_token" => &mut profile.decode_per_kv_token,
                "swap_bandwidth" => &mut profile.swap_bandwidth,
                "fabric_bandwidth" => &mut profile.fabric_bandwidth,
                "fabric_latency" => &mut profile.fabric_latency,
                other => return Err(Error::parse(entry.line, format!("unknown profile key `{other}`"))),
            };
            *slot = v;
        }
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&kv::read_to_string(path)?)
    }

    /// Returns a copy with the decode coefficients replaced by a fit.
    pub fn with_decode(&self, fit: &DecodeFit) -> Self {
        Self {
            decode_base: fit.base,
            decode_per_request: fit.per_request,
            decode_per_kv_token: fit.per_kv_token,
            ..*self
        }
    }
}

/// One measured decode iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSample {
    pub batch_size: f64,
    pub total_kv_tokens: f64,
    pub seconds: f64,
}

/// Least-squares decode coefficients and their residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeFit {
    pub base: f64,
    pub per_request: f64,
    pub per_kv_token: f64,
    /// observed - predicted, in sample order.
    pub residuals: Vec<f64>,
    pub sum_squared_residuals: f64,
}

impl DecodeFit {
    pub fn predict(&self, batch_size: f64, total_kv_tokens: f64) -> f64 {
        self.base + self.per_request * batch_size + self.per_kv_token * total_kv_tokens
    }
}

/// Fits `seconds ~ base + per_request*batch + per_kv_token*kv` by least squares.
pub fn calibrate(samples: &[StepSample]) -> Result<DecodeFit> {
    if samples.len() < 3 {
        return Err(Error::RankDeficient(format!(
            "{} samples, need at least 3",
            samples.len()
        )));
    }
    if samples
        .iter()
        .any(|s| !(s.batch_size.is_finite() && s.total_kv_tokens.is_finite() && s.seconds.is_finite()))
    {
        return Err(Error::invalid("samples", "all values must be finite"));
    }
    // Column scaling keeps the singular-value test meaningful when KV totals
    // are orders of magnitude larger than batch sizes.
    let scale = |col: &dyn Fn(&StepSample) -> f64| {
        samples
            .iter()
            .map(|s| col(s).abs())
            .fold(0.0_f64, f64::max)
            .max(1.0)
    };
    let batch_scale = scale(&|s| s.batch_size);
    let kv_scale = scale(&|s| s.total_kv_tokens);
    let a = DMatrix::from_fn(samples.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => samples[i].batch_size / batch_scale,
        _ => samples[i].total_kv_tokens / kv_scale,
    });
    let b = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.seconds));
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if max_sv == 0.0 || min_sv / max_sv < 1e-10 {
        return Err(Error::RankDeficient(format!(
            "singular values span {min_sv:e}..{max_sv:e}"
        )));
    }
    let x = svd
        .solve(&b, 1e-14)
        .map_err(|e| Error::RankDeficient(e.to_string()))?;
    let fit_residuals = &b - &a * &x;
    let residuals: Vec<f64> = fit_residuals.iter().copied().collect();
    Ok(DecodeFit {
        base: x[0],
        per_request: x[1] / batch_scale,
        per_kv_token: x[2] / kv_scale,
        sum_squared_residuals: residuals.iter().map(|r| r * r).sum(),
        residuals,
    })
}

/// Parses `batch,kv,seconds` lines; blank lines and `#` comments are skipped.
pub fn parse_samples(text: &str) -> Result<Vec<StepSample>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = t.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::parse(
                line,
                format!("expected batch,kv,seconds, found `{t}`"),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            parts[i]
                .parse::<f64>()
                .map_err(|_| Error::parse(line, format!("`{}` is not a number", parts[i])))
        };
        out.push(StepSample {
            batch_size: num(0)?,
            total_kv_tokens: num(1)?,
            seconds: num(2)?,
        });
    }
    Ok(out)
}
