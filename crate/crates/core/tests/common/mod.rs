#![allow(dead_code)]

use std::time::Duration;

use behave_core::{EndpointConfig, ProviderClient, RetryPolicy, StimulusRow, StimulusSet};
use behave_mock::MockServer;
use serde_json::Value;

pub const SYSTEM: &str = "You are a participant in a psycholinguistic experiment.";

/// Retries quickly so error-path tests stay fast.
pub fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        base_delay: Duration::from_millis(5),
        max_delay: Duration::from_millis(50),
        ..RetryPolicy::default()
    }
}

pub fn chat_client(server: &MockServer, retry: RetryPolicy) -> ProviderClient {
    let cfg =
        EndpointConfig::new(Some("test-key".into()), &server.chat_url(), "mock-model").unwrap();
    ProviderClient::new(cfg, retry).unwrap()
}

pub fn text_client(server: &MockServer, retry: RetryPolicy) -> ProviderClient {
    let cfg = EndpointConfig::new(None, &server.completions_url(), "mock-model").unwrap();
    ProviderClient::new(cfg, retry).unwrap()
}

pub fn fragment(name: &str) -> String {
    format!("Please repeat the fragment and complete it into a full sentence: Although {name} was sick,")
}

/// `runs` runs of `trials` trials each; items are numbered across runs.
pub fn multi_trial_set(runs: u32, trials: u32) -> StimulusSet {
    let rows = (0..runs)
        .flat_map(|r| {
            (0..trials).map(move |t| {
                let item = r * trials + t + 1;
                StimulusRow::new(
                    r + 1,
                    item,
                    if t % 2 == 0 { "open" } else { "closed" },
                    fragment(&format!("Name{item}")),
                )
            })
        })
        .collect();
    StimulusSet::from_rows(rows, "multi.csv").unwrap()
}

/// One trial per run; each item appears once per condition.
pub fn one_trial_set(
    items: u32,
    conditions: &[&str],
    name: impl Fn(u32, &str) -> String,
) -> StimulusSet {
    let mut rows = Vec::new();
    for item in 1..=items {
        for condition in conditions {
            let run = rows.len() as u32 + 1;
            rows.push(StimulusRow::new(
                run,
                item,
                *condition,
                fragment(&name(item, condition)),
            ));
        }
    }
    StimulusSet::from_rows(rows, "one.csv").unwrap()
}

pub fn captured_json(server: &MockServer) -> Vec<Value> {
    server
        .captures()
        .iter()
        .map(|c| serde_json::from_str(&c.body).unwrap())
        .collect()
}

pub fn roles(request: &Value) -> Vec<String> {
    request["messages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["role"].as_str().unwrap().to_string())
        .collect()
}
