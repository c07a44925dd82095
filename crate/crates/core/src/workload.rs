//! Synthetic request traces: Poisson arrivals with parametric token-length
//! distributions, trace mixing, and the `pascal-trace-v1` file format.

use std::fmt::Write as _;
use std::ops::Deref;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::kv::{self, format_seconds};
use crate::RequestId;

pub const TRACE_FORMAT: &str = "pascal-trace-v1";

/// Static description of a single inference request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestSpec {
    pub id: RequestId,
    /// Submission time in seconds.
    pub arrival_time: f64,
    pub prompt_tokens: u64,
    /// Hidden reasoning tokens decoded before the first answering token.
    pub reasoning_tokens: u64,
    pub answering_tokens: u64,
    /// The prompt's KV cache already exists at arrival, so no prefill runs.
    pub kv_preloaded: bool,
}

impl RequestSpec {
    /// Reasoning plus answering tokens.
    pub fn output_tokens(&self) -> u64 {
        self.reasoning_tokens + self.answering_tokens
    }

    /// KV footprint right before the request completes.
    pub fn peak_kv_tokens(&self) -> u64 {
        self.prompt_tokens + self.output_tokens()
    }

    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if !self.arrival_time.is_finite() || self.arrival_time < 0.0 {
            return Err((
                "arrival_time",
                format!("must be a non-negative number, got {}", self.arrival_time),
            ));
        }
        if self.prompt_tokens == 0 {
            return Err(("prompt_tokens", "must be at least 1".into()));
        }
        if self.answering_tokens == 0 {
            return Err(("answering_tokens", "must be at least 1".into()));
        }
        Ok(())
    }
}

/// An ordered request trace: unique ids, sorted by `(arrival_time, id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    requests: Vec<RequestSpec>,
}

impl Trace {
    /// Validates every request and sorts into trace order.
    pub fn new(mut requests: Vec<RequestSpec>) -> Result<Self> {
        for r in &requests {
            r.check()
                .map_err(|(field, reason)| Error::invalid(format!("request {} {field}", r.id), reason))?;
        }
        requests.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time).then(a.id.cmp(&b.id)));
        let mut ids: Vec<RequestId> = requests.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateId(w[0]));
        }
        Ok(Self { requests })
    }

    pub fn requests(&self) -> &[RequestSpec] {
        &self.requests
    }

    pub fn into_requests(self) -> Vec<RequestSpec> {
        self.requests
    }
}

impl Deref for Trace {
    type Target = [RequestSpec];

    fn deref(&self) -> &[RequestSpec] {
        &self.requests
    }
}

/// Token-length model for one field of a request.
#[derive(Debug, Clone, PartialEq)]
pub enum LengthDistribution {
    Constant(u64),
    /// Inclusive bounds.
    Uniform {
        low: u64,
        high: u64,
    },
    /// `(value, weight)` pairs sampled by inverse CDF over cumulative weights.
    Histogram(Vec<(u64, f64)>),
}

impl LengthDistribution {
    pub fn uniform(low: u64, high: u64) -> Self {
        LengthDistribution::Uniform { low, high }
    }

    /// Checks the parameters; `min_value` is the smallest length the field
    /// accepts (1 for prompt and answering, 0 for reasoning).
    pub fn validate(&self, field: &str, min_value: u64) -> Result<()> {
        let fail = |reason: String| Err(Error::invalid(field, reason));
        match self {
            LengthDistribution::Constant(v) if *v < min_value => {
                fail(format!("constant {v} is below the minimum {min_value}"))
            }
            LengthDistribution::Constant(_) => Ok(()),
            LengthDistribution::Uniform { low, high } if low > high => {
                fail(format!("uniform low {low} exceeds high {high}"))
            }
            LengthDistribution::Uniform { low, .. } if *low < min_value => {
                fail(format!("uniform low {low} is below the minimum {min_value}"))
            }
            LengthDistribution::Uniform { .. } => Ok(()),
            LengthDistribution::Histogram(bins) => {
                if bins.iter().any(|(_, w)| !w.is_finite() || *w < 0.0) {
                    return fail("histogram weights must be finite and non-negative".into());
                }
                if !bins.iter().any(|(_, w)| *w > 0.0) {
                    return fail("histogram needs at least one positive weight".into());
                }
                if let Some((v, _)) = bins.iter().find(|(v, w)| *w > 0.0 && *v < min_value) {
                    return fail(format!("histogram value {v} is below the minimum {min_value}"));
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            LengthDistribution::Constant(v) => *v,
            LengthDistribution::Uniform { low, high } => rng.random_range(*low..=*high),
            LengthDistribution::Histogram(bins) => {
                let total: f64 = bins.iter().map(|(_, w)| w).sum();
                let u = rng.random::<f64>() * total;
                let mut acc = 0.0;
                for (v, w) in bins {
                    acc += w;
                    if u < acc {
                        return *v;
                    }
                }
                // u landed on the rounding edge of the last bin
                bins.iter()
                    .rev()
                    .find(|(_, w)| *w > 0.0)
                    .map(|(v, _)| *v)
                    .unwrap_or(0)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            LengthDistribution::Constant(v) => *v as f64,
            LengthDistribution::Uniform { low, high } => (*low as f64 + *high as f64) / 2.0,
            LengthDistribution::Histogram(bins) => {
                let total: f64 = bins.iter().map(|(_, w)| w).sum();
                bins.iter().map(|(v, w)| *v as f64 * w).sum::<f64>() / total
            }
        }
    }

    pub fn max_value(&self) -> u64 {
        match self {
            LengthDistribution::Constant(v) => *v,
            LengthDistribution::Uniform { high, .. } => *high,
            LengthDistribution::Histogram(bins) => bins
                .iter()
                .filter(|(_, w)| *w > 0.0)
                .map(|(v, _)| *v)
                .max()
                .unwrap_or(0),
        }
    }
}

/// Parameters for [`generate_trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct TraceParams {
    pub count: usize,
    /// Poisson arrival rate in requests per second.
    pub arrival_rate: f64,
    pub prompt: LengthDistribution,
    pub reasoning: LengthDistribution,
    pub answering: LengthDistribution,
    pub kv_preloaded: bool,
}

impl TraceParams {
    pub fn validate(&self) -> Result<()> {
        if !self.arrival_rate.is_finite() || self.arrival_rate <= 0.0 {
            return Err(Error::invalid(
                "arrival_rate",
                format!("must be a positive number, got {}", self.arrival_rate),
            ));
        }
        self.prompt.validate("prompt_dist", 1)?;
        self.reasoning.validate("reasoning_dist", 0)?;
        self.answering.validate("answering_dist", 1)?;
        Ok(())
    }
}

/// Generates `count` requests with exponential inter-arrival gaps. The first
/// arrival happens one gap after time zero. Identical params and seed give a
/// bit-identical trace.
pub fn generate_trace(params: &TraceParams, seed: u64) -> Result<Trace> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaps = Exp::new(params.arrival_rate).map_err(|e| Error::invalid("arrival_rate", e.to_string()))?;
    let mut now = 0.0;
    let mut requests = Vec::with_capacity(params.count);
    for id in 0..params.count {
        now += gaps.sample(&mut rng);
        requests.push(RequestSpec {
            id: id as RequestId,
            arrival_time: now,
            prompt_tokens: params.prompt.sample(&mut rng),
            reasoning_tokens: params.reasoning.sample(&mut rng),
            answering_tokens: params.answering.sample(&mut rng),
            kv_preloaded: params.kv_preloaded,
        });
    }
    Trace::new(requests)
}

/// Replaces the length fields of `floor(fraction * |base|)` base requests,
/// chosen uniformly without replacement, with the lengths of requests drawn
/// uniformly from `replacement`. Ids and arrival times are kept.
pub fn mix_traces(base: &Trace, replacement: &Trace, fraction: f64, seed: u64) -> Result<Trace> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(
            "fraction",
            format!("must lie in [0, 1], got {fraction}"),
        ));
    }
    let n = base.len();
    let k = ((fraction * n as f64).floor() as usize).min(n);
    if k == 0 {
        return Ok(base.clone());
    }
    if replacement.is_empty() {
        return Err(Error::invalid("replacement", "trace is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    let mut requests = base.requests.clone();
    for i in chosen {
        let donor = &replacement[rng.random_range(0..replacement.len())];
        let r = &mut requests[i];
        r.prompt_tokens = donor.prompt_tokens;
        r.reasoning_tokens = donor.reasoning_tokens;
        r.answering_tokens = donor.answering_tokens;
    }
    Trace::new(requests)
}

/// Serializes a trace in `pascal-trace-v1` form.
pub fn trace_to_string(trace: &Trace) -> String {
    let mut out = String::new();
    out.push_str(TRACE_FORMAT);
    out.push('\n');
    out.push_str("# id,arrival_time,prompt_tokens,reasoning_tokens,answering_tokens,kv_preloaded\n");
    for r in trace.iter() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.id,
            format_seconds(r.arrival_time),
            r.prompt_tokens,
            r.reasoning_tokens,
            r.answering_tokens,
            u8::from(r.kv_preloaded)
        );
    }
    out
}

/// Parses `pascal-trace-v1` text. An empty document is an empty trace.
pub fn parse_trace(text: &str) -> Result<Trace> {
    let mut requests = Vec::new();
    let mut seen_header = false;
    let mut seen_ids = std::collections::HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !seen_header {
            if trimmed != TRACE_FORMAT {
                return Err(Error::parse(line, format!("expected `{TRACE_FORMAT}` header")));
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 5 && fields.len() != 6 {
            return Err(Error::parse(
                line,
                format!("expected 5 or 6 fields, found {}", fields.len()),
            ));
        }
        let int = |i: usize, name: &str| -> Result<u64> {
            fields[i].parse::<u64>().map_err(|_| {
                Error::parse(
                    line,
                    format!("{name}: `{}` is not a non-negative integer", fields[i]),
                )
            })
        };
        let id = int(0, "id")?;
        let arrival_time: f64 = fields[1]
            .parse()
            .map_err(|_| Error::parse(line, format!("arrival_time: `{}` is not a number", fields[1])))?;
        let kv_preloaded = match fields.get(5) {
            None => false,
            Some(v) => kv::parse_bool(v)
                .ok_or_else(|| Error::parse(line, format!("kv_preloaded: `{v}` is not a boolean")))?,
        };
        let spec = RequestSpec {
            id,
            arrival_time,
            prompt_tokens: int(2, "prompt_tokens")?,
            reasoning_tokens: int(3, "reasoning_tokens")?,
            answering_tokens: int(4, "answering_tokens")?,
            kv_preloaded,
        };
        spec.check()
            .map_err(|(field, reason)| Error::parse(line, format!("{field}: {reason}")))?;
        if !seen_ids.insert(id) {
            return Err(Error::parse(line, format!("duplicate request id {id}")));
        }
        requests.push(spec);
    }
    Trace::new(requests)
}

pub fn save_trace(trace: &Trace, path: &Path) -> Result<()> {
    kv::write_atomic(path, &trace_to_string(trace))
}

pub fn load_trace(path: &Path) -> Result<Trace> {
    parse_trace(&kv::read_to_string(path)?)
}

/// Named workload shapes used by the CLI and the experiment suites.
///
/// The chat and reasoning-heavy histograms are hand-made stand-ins with the
/// qualitative shape of public chat and problem-solving benchmarks (skewed
/// toward short reasoning, long tails). They are not measured data.
pub mod presets {
    use super::*;

    /// Reasoning-phase characterization: prompt 128, reasoning uniform
    /// 128..=2048, a single answering token.
    pub fn reasoning_characterization(count: usize, arrival_rate: f64) -> TraceParams {
        TraceParams {
            count,
            arrival_rate,
            prompt: LengthDistribution::Constant(128),
            reasoning: LengthDistribution::uniform(128, 2048),
            answering: LengthDistribution::Constant(1),
            kv_preloaded: false,
        }
    }

    /// Answering-phase characterization: a 128-token prefix whose KV already
    /// exists, answering uniform 128..=2048.
    pub fn answering_characterization(count: usize, arrival_rate: f64) -> TraceParams {
        TraceParams {
            count,
            arrival_rate,
            prompt: LengthDistribution::Constant(128),
            reasoning: LengthDistribution::Constant(0),
            answering: LengthDistribution::uniform(128, 2048),
            kv_preloaded: true,
        }
    }

    /// Chat-style requests: short prompts, reasoning mostly under 1000
    /// tokens with a long tail, medium-length answers.
    pub fn chat(count: usize, arrival_rate: f64) -> TraceParams {
        TraceParams {
            count,
            arrival_rate,
            prompt: LengthDistribution::Histogram(vec![
                (32, 2.0),
                (64, 3.0),
                (128, 3.0),
                (256, 1.5),
                (512, 0.5),
            ]),
            reasoning: LengthDistribution::Histogram(vec![
                (64, 1.0),
                (128, 2.0),
                (192, 2.5),
                (256, 2.5),
                (384, 3.0),
                (512, 2.5),
                (640, 2.0),
                (768, 1.5),
                (896, 1.2),
                (1024, 1.0),
                (1280, 0.8),
                (1536, 0.6),
                (2048, 0.5),
                (3072, 0.3),
                (4096, 0.15),
            ]),
            answering: LengthDistribution::Histogram(vec![
                (128, 1.0),
                (256, 2.0),
                (384, 2.5),
                (512, 2.5),
                (768, 2.0),
                (1024, 1.2),
                (1536, 0.6),
                (2048, 0.3),
            ]),
            kv_preloaded: false,
        }
    }

    /// Problem-solving requests: long reasoning, short answers.
    pub fn reasoning_heavy(count: usize, arrival_rate: f64) -> TraceParams {
        TraceParams {
            count,
            arrival_rate,
            prompt: LengthDistribution::Histogram(vec![(64, 1.0), (128, 2.0), (256, 1.0)]),
            reasoning: LengthDistribution::Histogram(vec![
                (1024, 1.0),
                (1536, 1.5),
                (2048, 2.0),
                (3072, 2.0),
                (4096, 1.5),
                (6144, 0.8),
                (8192, 0.3),
            ]),
            answering: LengthDistribution::Histogram(vec![(32, 1.0), (64, 2.0), (128, 2.0), (256, 1.0)]),
            kv_preloaded: false,
        }
    }

    /// Chat trace with `fraction` of its requests given reasoning-heavy
    /// lengths.
    pub fn mixed(count: usize, arrival_rate: f64, fraction: f64, seed: u64) -> Result<Trace> {
        let base = generate_trace(&chat(count, arrival_rate), seed)?;
        let heavy = generate_trace(&reasoning_heavy(count.max(1), arrival_rate), seed.wrapping_add(1))?;
        mix_traces(&base, &heavy, fraction, seed.wrapping_add(2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: u64, t: f64) -> RequestSpec {
        RequestSpec {
            id,
            arrival_time: t,
            prompt_tokens: 4,
            reasoning_tokens: 2,
            answering_tokens: 3,
            kv_preloaded: false,
        }
    }

    #[test]
    fn empty_count_gives_empty_trace() {
        let p = presets::chat(0, 1.0);
        assert!(generate_trace(&p, 1).unwrap().is_empty());
    }

    #[test]
    fn characterization_shape() {
        let t = generate_trace(&presets::reasoning_characterization(300, 4.0), 11).unwrap();
        assert_eq!(t.len(), 300);
        assert!(t
            .iter()
            .all(|r| r.prompt_tokens == 128 && r.answering_tokens == 1));
        assert!(t.iter().all(|r| (128..=2048).contains(&r.reasoning_tokens)));
        assert!(t[0].arrival_time > 0.0);
    }

    #[test]
    fn same_seed_same_trace() {
        let p = presets::chat(200, 3.0);
        assert_eq!(generate_trace(&p, 5).unwrap(), generate_trace(&p, 5).unwrap());
        assert_ne!(generate_trace(&p, 5).unwrap(), generate_trace(&p, 6).unwrap());
    }

    #[test]
    fn bad_distributions_name_the_field() {
        let mut p = presets::chat(10, 1.0);
        p.reasoning = LengthDistribution::uniform(10, 5);
        let msg = generate_trace(&p, 1).unwrap_err().to_string();
        assert!(msg.contains("reasoning_dist"), "{msg}");

        let mut p = presets::chat(10, 1.0);
        p.answering = LengthDistribution::Histogram(vec![(3, 0.0)]);
        assert!(generate_trace(&p, 1)
            .unwrap_err()
            .to_string()
            .contains("answering_dist"));

        let mut p = presets::chat(10, 1.0);
        p.prompt = LengthDistribution::Constant(0);
        assert!(generate_trace(&p, 1)
            .unwrap_err()
            .to_string()
            .contains("prompt_dist"));

        let mut p = presets::chat(10, 1.0);
        p.arrival_rate = 0.0;
        assert!(generate_trace(&p, 1)
            .unwrap_err()
            .to_string()
            .contains("arrival_rate"));
    }

    #[test]
    fn histogram_never_returns_zero_weight_values() {
        let d = LengthDistribution::Histogram(vec![(1, 0.0), (7, 1.0), (9, 0.0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..1000).all(|_| d.sample(&mut rng) == 7));
    }

    #[test]
    fn trace_rejects_duplicates_and_sorts() {
        assert!(matches!(
            Trace::new(vec![spec(1, 0.0), spec(1, 1.0)]),
            Err(Error::DuplicateId(1))
        ));
        let t = Trace::new(vec![spec(2, 1.0), spec(1, 1.0), spec(0, 2.0)]).unwrap();
        let ids: Vec<_> = t.iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![1, 2, 0]);
    }

    #[test]
    fn mix_identity_and_full_replacement() {
        let base = generate_trace(&presets::chat(50, 2.0), 1).unwrap();
        let heavy = generate_trace(&presets::reasoning_heavy(20, 2.0), 2).unwrap();
        assert_eq!(mix_traces(&base, &heavy, 0.0, 9).unwrap(), base);

        let all = mix_traces(&base, &heavy, 1.0, 9).unwrap();
        for (a, b) in all.iter().zip(base.iter()) {
            assert_eq!((a.id, a.arrival_time), (b.id, b.arrival_time));
            assert!(heavy.iter().any(|h| h.reasoning_tokens == a.reasoning_tokens
                && h.answering_tokens == a.answering_tokens
                && h.prompt_tokens == a.prompt_tokens));
        }
        assert!(mix_traces(&base, &heavy, 1.5, 9).is_err());
        assert!(mix_traces(&base, &heavy, -0.1, 9).is_err());
        assert!(mix_traces(&base, &Trace::default(), 0.5, 9).is_err());
    }

    #[test]
    fn parse_reports_line_numbers() {
        let text = format!("{TRACE_FORMAT}\n0,0.5,1,0,1\n1,-2.0,1,0,1\n");
        match parse_trace(&text).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("arrival_time"));
            }
            e => panic!("unexpected {e}"),
        }
        let text = format!("{TRACE_FORMAT}\n0,0.5,1,0,1\n0,0.7,1,0,1\n");
        assert!(matches!(parse_trace(&text), Err(Error::Parse { line: 3, .. })));
        let text = format!("{TRACE_FORMAT}\n0,0.5,1,x,1\n");
        assert!(matches!(parse_trace(&text), Err(Error::Parse { line: 2, .. })));
        assert!(parse_trace("").unwrap().is_empty());
    }

    #[test]
    fn optional_preloaded_column() {
        let text = format!("{TRACE_FORMAT}\n0,0.5,128,0,9,1\n1,0.6,128,0,9\n");
        let t = parse_trace(&text).unwrap();
        assert!(t[0].kv_preloaded);
        assert!(!t[1].kv_preloaded);
    }
}
