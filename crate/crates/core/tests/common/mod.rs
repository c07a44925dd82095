#![allow(dead_code)]

use pascal_core::cluster::Policy;
use pascal_core::config::{Capacity, RunConfig};
use pascal_core::engine::{run, RunOutput};
use pascal_core::{LatencyProfile, RequestSpec, Trace};

pub fn request(id: u64, arrival: f64, prompt: u64, reasoning: u64, answering: u64) -> RequestSpec {
    RequestSpec {
        id,
        arrival_time: arrival,
        prompt_tokens: prompt,
        reasoning_tokens: reasoning,
        answering_tokens: answering,
        kv_preloaded: false,
    }
}

/// Three requests of 100 prompt tokens and 8 answering tokens arriving at
/// t = 0, 1, 2 on one instance with room for two of them; quantum 4; every
/// prefill and decode step takes one time unit.
pub fn three_request_trace() -> Trace {
    Trace::new(vec![
        request(0, 0.0, 100, 0, 8),
        request(1, 1.0, 100, 0, 8),
        request(2, 2.0, 100, 0, 8),
    ])
    .unwrap()
}

pub fn three_request_config(policy: Policy) -> RunConfig {
    RunConfig {
        instance_count: 1,
        capacity: Capacity::Tokens(2 * 108),
        token_quantum: 4,
        policy,
        ..RunConfig::default()
    }
}

pub fn run_three_requests(policy: Policy) -> RunOutput {
    run(
        &three_request_trace(),
        &three_request_config(policy),
        &LatencyProfile::unit_steps(),
        0,
    )
    .unwrap()
}

pub mod qoe;
pub mod selection;
