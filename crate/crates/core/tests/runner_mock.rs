mod common;

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use behave_core::analysis::{logprob_gender_share, record_share, sample_first_token, GenderTokens};
use behave_core::budget::{token_check_run, BudgetOptions, ReportKind};
use behave_core::protocol::{extract_completions, extract_logprobs, render_body};
use behave_core::runner::{read_results, run_schedule, RunnerError, RESULT_COLUMNS};
use behave_core::tokenizer::{BpeTokenizer, Tokenizer};
use behave_core::{
    build_schedule, run_experiment, EndpointMode, GenerationParams, Logprobs, ResultRecord,
    RetryPolicy, RunOptions,
};
use behave_mock::{Matcher, MockServer, Rule, Scenario, ScriptedResponse};
use common::*;
use serde_json::Value;

fn chat_params(max_tokens: u32) -> GenerationParams {
    GenerationParams {
        system_prompt: SYSTEM.into(),
        max_tokens,
        ..GenerationParams::default()
    }
}

async fn collect(
    schedule: &behave_core::Schedule,
    client: &behave_core::ProviderClient,
    params: &GenerationParams,
    options: &RunOptions,
) -> (behave_core::RunSummary, Vec<ResultRecord>) {
    let sink = Arc::new(Mutex::new(Vec::<ResultRecord>::new()));
    let summary = run_schedule(schedule, client, params, sink.clone(), options)
        .await
        .unwrap();
    let records = sink.lock().unwrap().clone();
    (summary, records)
}

#[tokio::test]
async fn conversation_carries_earlier_turns() {
    let server = MockServer::start_local(Scenario {
        rules: vec![Rule::new(
            Matcher::Contains("complete".into()),
            (1..=4)
                .map(|i| ScriptedResponse::fixed(format!("reply {i}")))
                .collect(),
        )],
        ..Scenario::constant("unused")
    })
    .await
    .unwrap();
    let set = multi_trial_set(1, 4);
    let schedule = build_schedule(&set, 1, false, 0).unwrap();
    let (summary, records) = collect(
        &schedule,
        &chat_client(&server, fast_retry()),
        &chat_params(50),
        &RunOptions::default(),
    )
    .await;
    assert_eq!(summary.records_written, 4);

    let requests = captured_json(&server);
    assert_eq!(requests.len(), 4);
    for (k, request) in requests.iter().enumerate() {
        let messages = request["messages"].as_array().unwrap();
        assert_eq!(messages.len(), 2 * k + 2);
        assert_eq!(messages[0]["content"], SYSTEM);
        for turn in 0..=k {
            assert_eq!(messages[1 + 2 * turn]["content"], set.rows[turn].prompt);
            if turn < k {
                assert_eq!(
                    messages[2 + 2 * turn]["content"],
                    format!("reply {}", turn + 1)
                );
            }
        }
        // The Message column is exactly the messages array that was sent.
        assert_eq!(records[k].message, render_body(&request["messages"]));
        assert_eq!(records[k].trial, k as u32 + 1);
        assert_eq!(records[k].response, format!("reply {}", k + 1));
        assert!(records[k].raw_response.contains("chat.completion"));
    }
}

#[tokio::test]
async fn runs_never_share_context_under_parallelism() {
    let server = MockServer::start_local(Scenario::constant("ok"))
        .await
        .unwrap();
    let set = multi_trial_set(6, 3);
    let schedule = build_schedule(&set, 2, true, 99).unwrap();
    let options = RunOptions {
        parallelism: 4,
        ..RunOptions::default()
    };
    let (summary, records) = collect(
        &schedule,
        &chat_client(&server, fast_retry()),
        &chat_params(20),
        &options,
    )
    .await;
    assert_eq!(summary.records_written, 36);
    assert_eq!(records.len(), 36);
    for request in captured_json(&server) {
        let users: Vec<&str> = request["messages"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|m| m["role"] == "user")
            .map(|m| m["content"].as_str().unwrap())
            .collect();
        let runs: std::collections::HashSet<u32> = users
            .iter()
            .map(|p| set.rows.iter().find(|r| r.prompt == *p).unwrap().run)
            .collect();
        assert_eq!(runs.len(), 1, "a request mixed prompts from several runs");
    }
}

#[tokio::test]
async fn budget_bounds_what_is_actually_sent() {
    // Replies are shorter than max_tokens, so every request fits the budget.
    let server = MockServer::start_local(Scenario::constant(
        "Although Name1 was sick, she went to work.",
    ))
    .await
    .unwrap();
    let set = multi_trial_set(2, 5);
    let schedule = build_schedule(&set, 1, false, 0).unwrap();
    let params = chat_params(40);
    collect(
        &schedule,
        &chat_client(&server, fast_retry()),
        &params,
        &RunOptions::default(),
    )
    .await;

    let tok = BpeTokenizer::gpt2();
    let report =
        token_check_run(&schedule, &params, tok.as_ref(), BudgetOptions::default()).unwrap();
    let ReportKind::MultiTrial { per_run } = report.kind else {
        panic!()
    };
    for request in captured_json(&server) {
        let messages = request["messages"].as_array().unwrap();
        let first_user = messages[1]["content"].as_str().unwrap();
        let run = set
            .rows
            .iter()
            .find(|r| r.prompt == first_user)
            .unwrap()
            .run;
        let sent: usize = messages
            .iter()
            .map(|m| tok.count(m["content"].as_str().unwrap()))
            .sum();
        let budget = per_run
            .iter()
            .find(|b| b.run_index == run)
            .unwrap()
            .max_tokens_per_run;
        assert!(
            sent + params.max_tokens as usize <= budget,
            "run {run}: {sent} + {} > {budget}",
            params.max_tokens
        );
    }
}

#[tokio::test]
async fn every_choice_is_recorded() {
    let server = MockServer::start_local(Scenario::constant("she"))
        .await
        .unwrap();
    let set = one_trial_set(3, &["open", "closed"], |i, c| format!("{c}{i}"));
    let schedule = build_schedule(&set, 2, false, 0).unwrap();
    let params = GenerationParams {
        n: 3,
        ..chat_params(10)
    };
    let (summary, records) = collect(
        &schedule,
        &chat_client(&server, fast_retry()),
        &params,
        &RunOptions::default(),
    )
    .await;
    assert_eq!(summary.records_written, 2 * 6 * 3);
    assert_eq!(records.len(), 36);
    for chunk in records.chunks(3) {
        assert_eq!(chunk.iter().map(|r| r.n).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(chunk
            .iter()
            .all(|r| r.raw_response == chunk[0].raw_response));
    }
    assert!(captured_json(&server).iter().all(|r| r["n"] == 3));
}

#[tokio::test]
async fn multi_trial_forces_single_choice() {
    let server = MockServer::start_local(Scenario::constant("ok"))
        .await
        .unwrap();
    let schedule = build_schedule(&multi_trial_set(1, 2), 1, false, 0).unwrap();
    let params = GenerationParams {
        n: 3,
        ..chat_params(10)
    };
    let (summary, _) = collect(
        &schedule,
        &chat_client(&server, fast_retry()),
        &params,
        &RunOptions::default(),
    )
    .await;
    assert_eq!(summary.records_written, 2);
    assert!(captured_json(&server).iter().all(|r| r["n"] == 1));
}

#[tokio::test]
async fn transient_errors_are_retried() {
    let server = MockServer::start_local(Scenario {
        rules: vec![Rule::new(
            Matcher::Contains("complete".into()),
            vec![ScriptedResponse::fixed("ok")],
        )
        .with_statuses(vec![429, 503, 200])],
        ..Scenario::constant("unused")
    })
    .await
    .unwrap();
    let schedule = build_schedule(
        &one_trial_set(1, &["open"], |i, _| format!("N{i}")),
        1,
        false,
        0,
    )
    .unwrap();
    let (summary, records) = collect(
        &schedule,
        &chat_client(&server, fast_retry()),
        &chat_params(10),
        &RunOptions::default(),
    )
    .await;
    assert_eq!(summary.runs_aborted, 0);
    assert_eq!(records.len(), 1);
    let statuses: Vec<u16> = server.captures().iter().map(|c| c.status).collect();
    assert_eq!(statuses, vec![429, 503, 200]);
}

#[tokio::test]
async fn fatal_error_aborts_only_its_run() {
    let server = MockServer::start_local(Scenario {
        rules: vec![Rule::new(
            Matcher::Contains("Bad1".into()),
            vec![ScriptedResponse::fixed("never")],
        )
        .with_statuses(vec![401])],
        ..Scenario::constant("fine")
    })
    .await
    .unwrap();
    let set = one_trial_set(3, &["x"], |i, _| {
        if i == 1 {
            "Bad1".into()
        } else {
            format!("Good{i}")
        }
    });
    let schedule = build_schedule(&set, 1, false, 0).unwrap();
    let (summary, records) = collect(
        &schedule,
        &chat_client(&server, fast_retry()),
        &chat_params(10),
        &RunOptions::default(),
    )
    .await;
    assert_eq!(summary.runs_total, 3);
    assert_eq!(summary.runs_aborted, 1);
    assert_eq!(summary.aborts[0].run, 1);
    assert!(summary.aborts[0].reason.contains("401"));
    assert_eq!(records.len(), 2);
    assert_eq!(server.captures().len(), 3);
}

#[tokio::test]
async fn retries_exhaust_and_abort() {
    let server = MockServer::start_local(Scenario {
        rules: vec![Rule::new(
            Matcher::Contains("complete".into()),
            vec![ScriptedResponse::fixed("x")],
        )
        .with_statuses(vec![500; 10])],
        ..Scenario::constant("unused")
    })
    .await
    .unwrap();
    let schedule = build_schedule(&multi_trial_set(1, 3), 1, false, 0).unwrap();
    let retry = RetryPolicy {
        max_attempts: 3,
        ..fast_retry()
    };
    let (summary, records) = collect(
        &schedule,
        &chat_client(&server, retry),
        &chat_params(10),
        &RunOptions::default(),
    )
    .await;
    assert_eq!(summary.runs_aborted, 1);
    assert_eq!(summary.aborts[0].trial, 1);
    assert!(records.is_empty());
    assert_eq!(server.captures().len(), 3);
}

#[tokio::test]
async fn text_mode_one_trial() {
    let server = MockServer::start_local(Scenario::constant(" she went home."))
        .await
        .unwrap();
    let set = one_trial_set(2, &["open"], |i, _| format!("N{i}"));
    let schedule = build_schedule(&set, 1, false, 0).unwrap();
    let params = GenerationParams {
        max_tokens: 5,
        ..GenerationParams::default()
    };
    let (_, records) = collect(
        &schedule,
        &text_client(&server, fast_retry()),
        &params,
        &RunOptions::default(),
    )
    .await;
    let requests = captured_json(&server);
    assert_eq!(requests[0]["prompt"], set.rows[0].prompt);
    assert!(requests[0].get("messages").is_none());
    assert_eq!(records[0].message, set.rows[0].prompt);
    assert_eq!(records[0].response, " she went home.");
    assert_eq!(server.captures()[0].endpoint, "/v1/completions");
}

#[tokio::test]
async fn text_mode_rejects_multi_trial_designs() {
    let server = MockServer::start_local(Scenario::constant("x"))
        .await
        .unwrap();
    let schedule = build_schedule(&multi_trial_set(1, 2), 1, false, 0).unwrap();
    let sink = Arc::new(Mutex::new(Vec::<ResultRecord>::new()));
    let err = run_schedule(
        &schedule,
        &text_client(&server, fast_retry()),
        &GenerationParams::default(),
        sink,
        &RunOptions::default(),
    )
    .await
    .unwrap_err();
    assert!(matches!(err, RunnerError::TextModeMultiTrial));
    assert!(server.captures().is_empty());
}

#[tokio::test]
async fn invalid_params_send_nothing() {
    let server = MockServer::start_local(Scenario::constant("x"))
        .await
        .unwrap();
    let schedule = build_schedule(
        &one_trial_set(1, &["a"], |i, _| format!("N{i}")),
        1,
        false,
        0,
    )
    .unwrap();
    let params = GenerationParams {
        logprobs: Logprobs::Count(6),
        ..GenerationParams::default()
    };
    let sink = Arc::new(Mutex::new(Vec::<ResultRecord>::new()));
    let err = run_schedule(
        &schedule,
        &text_client(&server, fast_retry()),
        &params,
        sink,
        &RunOptions::default(),
    )
    .await
    .unwrap_err();
    assert!(matches!(err, RunnerError::InvalidParams(_)));
    assert!(server.captures().is_empty());
}

#[tokio::test]
async fn unwritable_output_is_an_error() {
    let server = MockServer::start_local(Scenario::constant("x"))
        .await
        .unwrap();
    let schedule = build_schedule(
        &one_trial_set(1, &["a"], |i, _| format!("N{i}")),
        1,
        false,
        0,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing").join("out.csv");
    let err = run_experiment(
        &schedule,
        &chat_client(&server, fast_retry()),
        &chat_params(5),
        &path,
        &[],
        &RunOptions::default(),
    )
    .await
    .unwrap_err();
    assert!(matches!(err, RunnerError::Output(_)));
}

#[tokio::test]
async fn results_file_round_trips() {
    let server = MockServer::start_local(Scenario::constant("Although N1 was sick, she rested."))
        .await
        .unwrap();
    let set = one_trial_set(2, &["open", "closed"], |i, c| format!("{c}{i}"));
    let schedule = build_schedule(&set, 2, false, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for name in ["out.csv", "out.xlsx"] {
        let path = dir.path().join(name);
        let summary = run_experiment(
            &schedule,
            &chat_client(&server, fast_retry()),
            &chat_params(20),
            &path,
            &[],
            &RunOptions::default(),
        )
        .await
        .unwrap();
        assert_eq!(summary.records_written, 8);
        if name.ends_with(".csv") {
            let text = std::fs::read_to_string(&path).unwrap();
            assert_eq!(text.lines().next().unwrap(), RESULT_COLUMNS.join(","));
            let (records, extra) = read_results(&path).unwrap();
            assert_eq!(records.len(), 8);
            assert!(extra.is_empty());
            assert!(records
                .iter()
                .all(|r| r.response == "Although N1 was sick, she rested."));
        } else {
            assert!(std::fs::metadata(&path).unwrap().len() > 0);
            assert!(!dir.path().join("out.partial.csv").exists());
        }
    }
}

#[tokio::test]
async fn pacing_spaces_requests() {
    let server = MockServer::start_local(Scenario::constant("x"))
        .await
        .unwrap();
    let schedule = build_schedule(
        &one_trial_set(4, &["a"], |i, _| format!("N{i}")),
        1,
        false,
        0,
    )
    .unwrap();
    let options = RunOptions {
        parallelism: 4,
        min_request_interval: Duration::from_millis(40),
        ..RunOptions::default()
    };
    let started = Instant::now();
    collect(
        &schedule,
        &chat_client(&server, fast_retry()),
        &chat_params(5),
        &options,
    )
    .await;
    assert!(started.elapsed() >= Duration::from_millis(120));
    assert_eq!(server.captures().len(), 4);
}

#[tokio::test]
async fn logprob_shares_from_recorded_responses() {
    let table = vec![vec![
        (" she".to_string(), 0.3),
        (" he".to_string(), 0.4),
        (" they".to_string(), 0.3),
    ]];
    let server = MockServer::start_local(Scenario {
        rules: Vec::new(),
        default_response: ScriptedResponse::fixed(" he").with_logprobs(table).unwrap(),
        seed: 0,
    })
    .await
    .unwrap();
    let schedule = build_schedule(
        &one_trial_set(2, &["open"], |i, _| format!("N{i}")),
        1,
        false,
        0,
    )
    .unwrap();
    let params = GenerationParams {
        max_tokens: 1,
        logprobs: Logprobs::Count(5),
        ..GenerationParams::default()
    };
    let (_, records) = collect(
        &schedule,
        &text_client(&server, fast_retry()),
        &params,
        &RunOptions::default(),
    )
    .await;
    for record in &records {
        let completions = extract_completions(&record.raw_response, EndpointMode::Text).unwrap();
        assert_eq!(completions[0].text, " he");
        let positions = extract_logprobs(&record.raw_response, EndpointMode::Text).unwrap();
        assert!((positions[0].iter().map(|c| c.probability()).sum::<f64>() - 1.0).abs() < 1e-9);
        let share = record_share(record, EndpointMode::Text, &GenderTokens::default()).unwrap();
        assert!((share.share - 0.3 / 0.7).abs() < 1e-9);
    }
    assert_eq!(captured_json(&server)[0]["logprobs"], 5);
}

#[tokio::test]
async fn repeat_sampling_collects_missing_tokens() {
    let she = ScriptedResponse::fixed(" she")
        .with_logprobs(vec![vec![(" she".into(), 0.3)]])
        .unwrap();
    let he = ScriptedResponse::fixed(" he")
        .with_logprobs(vec![vec![(" he".into(), 0.4)]])
        .unwrap();
    let they = ScriptedResponse::fixed(" they")
        .with_logprobs(vec![vec![(" they".into(), 0.2)]])
        .unwrap();
    let server = MockServer::start_local(Scenario {
        rules: vec![Rule::new(
            Matcher::Contains("sick".into()),
            vec![she.clone(), they, she, he],
        )],
        ..Scenario::constant("unused")
    })
    .await
    .unwrap();
    let client = text_client(&server, fast_retry());
    let body = r#"{"model":"mock-model","prompt":"Although Pelcra was sick,","max_tokens":1,"n":1,"logprobs":1}"#;
    let tokens = GenderTokens {
        feminine: vec!["she".into()],
        masculine: vec!["he".into()],
    };
    let seen = sample_first_token(&client, body, &tokens, 10)
        .await
        .unwrap();
    assert_eq!(server.captures().len(), 4);
    assert_eq!(seen.len(), 3);
    assert!((logprob_gender_share(&seen).unwrap().share - 0.3 / 0.7).abs() < 1e-9);

    server.reset();
    let capped = sample_first_token(&client, body, &tokens, 2).await.unwrap();
    assert_eq!(server.captures().len(), 2);
    assert!(logprob_gender_share(&capped).unwrap().partial);
}

#[tokio::test]
async fn requests_are_byte_identical_across_repeats() {
    let server = MockServer::start_local(Scenario::constant("ok"))
        .await
        .unwrap();
    let schedule = build_schedule(&multi_trial_set(2, 2), 1, false, 0).unwrap();
    let client = chat_client(&server, fast_retry());
    collect(&schedule, &client, &chat_params(10), &RunOptions::default()).await;
    let first: Vec<String> = server.captures().into_iter().map(|c| c.body).collect();
    server.reset();
    collect(&schedule, &client, &chat_params(10), &RunOptions::default()).await;
    let second: Vec<String> = server.captures().into_iter().map(|c| c.body).collect();
    assert_eq!(first, second);
    let keys: Vec<String> = serde_json::from_str::<Value>(&first[0])
        .unwrap()
        .as_object()
        .unwrap()
        .keys()
        .cloned()
        .collect();
    assert_eq!(keys, vec!["model", "messages", "max_tokens", "n"]);
}
