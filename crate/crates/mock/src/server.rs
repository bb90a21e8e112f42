use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::scenario::{LogprobTable, Scenario, ScriptedResponse};

pub const CHAT_PATH: &str = "/v1/chat/completions";
pub const TEXT_PATH: &str = "/v1/completions";
pub const CAPTURES_PATH: &str = "/__captures";

#[derive(Debug, Error)]
pub enum MockError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Capture {
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u128,
    pub endpoint: String,
    /// Request body exactly as received.
    pub body: String,
    pub status: u16,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Endpoint {
    Chat,
    Text,
}

struct RuleState {
    rng: ChaCha8Rng,
    next_response: usize,
    statuses_used: usize,
}

struct Inner {
    scenario: Scenario,
    /// One entry per rule, then one for the default response.
    rules: Vec<RuleState>,
    captures: Vec<Capture>,
    served: u64,
}

type Shared = Arc<Mutex<Inner>>;

fn rule_states(scenario: &Scenario) -> Vec<RuleState> {
    (0..=scenario.rules.len())
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
            rng.set_stream(index as u64);
            RuleState {
                rng,
                next_response: 0,
                statuses_used: 0,
            }
        })
        .collect()
}

fn content_text(content: &Value) -> String {
    match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        _ => String::new(),
    }
}

/// The text rules are matched against.
fn match_target(endpoint: Endpoint, request: &Value) -> String {
    match endpoint {
        Endpoint::Chat => request
            .get("messages")
            .and_then(Value::as_array)
            .and_then(|m| {
                m.iter()
                    .rev()
                    .find(|m| m.get("role").and_then(Value::as_str) == Some("user"))
            })
            .and_then(|m| m.get("content"))
            .map(content_text)
            .unwrap_or_default(),
        Endpoint::Text => match request.get("prompt") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Array(items)) => items
                .first()
                .and_then(Value::as_str)
                .unwrap_or("")
                .to_string(),
            _ => String::new(),
        },
    }
}

fn sorted_position(position: &[(String, f64)]) -> Vec<(String, f64)> {
    let mut entries = position.to_vec();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1));
    entries
}

fn chat_logprobs(table: &LogprobTable, top: usize) -> Value {
    let content: Vec<Value> = table
        .iter()
        .map(|position| {
            let entries = sorted_position(position);
            let (token, p) = &entries[0];
            let alternatives: Vec<Value> = entries
                .iter()
                .take(top)
                .map(|(t, p)| json!({"token": t, "logprob": p.ln(), "bytes": t.as_bytes()}))
                .collect();
            json!({"token": token, "logprob": p.ln(), "bytes": token.as_bytes(), "top_logprobs": alternatives})
        })
        .collect();
    json!({ "content": content })
}

fn text_logprobs(table: &LogprobTable, top: usize) -> Value {
    let mut tokens = Vec::new();
    let mut values = Vec::new();
    let mut tops = Vec::new();
    let mut offsets = Vec::new();
    let mut offset = 0;
    for position in table {
        let entries = sorted_position(position);
        let (token, p) = &entries[0];
        tokens.push(json!(token));
        values.push(json!(p.ln()));
        offsets.push(json!(offset));
        offset += token.len();
        let map: serde_json::Map<String, Value> = entries
            .iter()
            .take(top)
            .map(|(t, p)| (t.clone(), json!(p.ln())))
            .collect();
        tops.push(Value::Object(map));
    }
    json!({"tokens": tokens, "token_logprobs": values, "top_logprobs": tops, "text_offset": offsets})
}

/// Requested logprob depth, or `None` when logprobs are off.
fn requested_logprobs(endpoint: Endpoint, request: &Value) -> Option<usize> {
    match endpoint {
        Endpoint::Chat => match request.get("logprobs") {
            Some(Value::Bool(true)) => Some(
                request
                    .get("top_logprobs")
                    .and_then(Value::as_u64)
                    .unwrap_or(0) as usize,
            ),
            _ => None,
        },
        Endpoint::Text => request
            .get("logprobs")
            .and_then(Value::as_u64)
            .map(|k| k as usize),
    }
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn error_body(status: u16) -> Value {
    let (kind, message) = match status {
        400 => ("invalid_request_error", "The request body is not valid."),
        401 => ("invalid_request_error", "Incorrect API key provided."),
        403 => ("permission_error", "You are not allowed to use this model."),
        404 => ("invalid_request_error", "The model does not exist."),
        429 => ("requests", "Rate limit reached for requests."),
        500..=599 => (
            "server_error",
            "The server had an error while processing your request.",
        ),
        _ => ("mock_error", "Scripted failure."),
    };
    json!({"error": {"message": message, "type": kind, "param": null, "code": status}})
}

struct Reply {
    status: u16,
    body: Value,
    latency: Option<Duration>,
    retry_after: Option<u64>,
}

fn plan_reply(inner: &mut Inner, endpoint: Endpoint, raw: &[u8]) -> Reply {
    let request: Value = match serde_json::from_slice(raw) {
        Ok(v @ Value::Object(_)) => v,
        _ => {
            return Reply {
                status: 400,
                body: error_body(400),
                latency: None,
                retry_after: None,
            }
        }
    };
    let target = match_target(endpoint, &request);
    let rule_index = inner
        .scenario
        .rules
        .iter()
        .position(|r| r.matcher.is_match(&target));
    let default_index = inner.scenario.rules.len();
    let (responses, latency, retry_after, status): (Vec<ScriptedResponse>, _, _, u16) =
        match rule_index {
            Some(i) => {
                let rule = &inner.scenario.rules[i];
                let state = &mut inner.rules[i];
                let status = rule
                    .status_sequence
                    .get(state.statuses_used)
                    .copied()
                    .unwrap_or(200);
                state.statuses_used += 1;
                (
                    rule.responses.clone(),
                    rule.latency_ms.map(Duration::from_millis),
                    rule.retry_after,
                    status,
                )
            }
            None => (
                vec![inner.scenario.default_response.clone()],
                None,
                None,
                200,
            ),
        };
    if status != 200 {
        return Reply {
            status,
            body: error_body(status),
            latency,
            retry_after,
        };
    }

    let state = &mut inner.rules[rule_index.unwrap_or(default_index)];
    let n = request.get("n").and_then(Value::as_u64).unwrap_or(1).max(1) as usize;
    let depth = requested_logprobs(endpoint, &request);
    let mut choices = Vec::with_capacity(n);
    let mut completion_words = 0;
    for index in 0..n {
        let response = &responses[state.next_response % responses.len()];
        state.next_response += 1;
        let text = response.emit(&mut state.rng);
        completion_words += word_count(&text);
        let logprobs = match (depth, &response.logprobs) {
            (Some(k), Some(table)) => match endpoint {
                Endpoint::Chat => chat_logprobs(table, k),
                Endpoint::Text => text_logprobs(table, k),
            },
            _ => Value::Null,
        };
        choices.push(match endpoint {
            Endpoint::Chat => json!({
                "index": index,
                "message": {"role": "assistant", "content": text},
                "logprobs": logprobs,
                "finish_reason": "stop",
            }),
            Endpoint::Text => json!({
                "text": text,
                "index": index,
                "logprobs": logprobs,
                "finish_reason": "stop",
            }),
        });
    }

    inner.served += 1;
    let prompt_words = match endpoint {
        Endpoint::Chat => request
            .get("messages")
            .and_then(Value::as_array)
            .map(|m| {
                m.iter()
                    .filter_map(|m| m.get("content"))
                    .map(|c| word_count(&content_text(c)))
                    .sum()
            })
            .unwrap_or(0),
        Endpoint::Text => word_count(&target),
    };
    let model = request.get("model").cloned().unwrap_or(Value::Null);
    let (id, object) = match endpoint {
        Endpoint::Chat => (format!("chatcmpl-mock-{}", inner.served), "chat.completion"),
        Endpoint::Text => (format!("cmpl-mock-{}", inner.served), "text_completion"),
    };
    Reply {
        status: 200,
        body: json!({
            "id": id,
            "object": object,
            "created": 0,
            "model": model,
            "choices": choices,
            "usage": {
                "prompt_tokens": prompt_words,
                "completion_tokens": completion_words,
                "total_tokens": prompt_words + completion_words,
            },
        }),
        latency,
        retry_after,
    }
}

async fn handle(shared: Shared, endpoint: Endpoint, raw: Bytes) -> Response {
    let reply = {
        let mut inner = shared.lock().expect("mock state poisoned");
        let reply = plan_reply(&mut inner, endpoint, &raw);
        inner.captures.push(Capture {
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            endpoint: match endpoint {
                Endpoint::Chat => CHAT_PATH,
                Endpoint::Text => TEXT_PATH,
            }
            .to_string(),
            body: String::from_utf8_lossy(&raw).into_owned(),
            status: reply.status,
        });
        reply
    };
    if let Some(latency) = reply.latency {
        tokio::time::sleep(latency).await;
    }
    let status = StatusCode::from_u16(reply.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let mut response = (status, Json(reply.body)).into_response();
    if status != StatusCode::OK {
        if let Some(seconds) = reply.retry_after {
            response
                .headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(seconds));
        }
    }
    response
}

async fn chat(State(shared): State<Shared>, raw: Bytes) -> Response {
    handle(shared, Endpoint::Chat, raw).await
}

async fn text(State(shared): State<Shared>, raw: Bytes) -> Response {
    handle(shared, Endpoint::Text, raw).await
}

async fn captures(State(shared): State<Shared>) -> Json<Vec<Capture>> {
    Json(shared.lock().expect("mock state poisoned").captures.clone())
}

/// A running mock server. Dropping the handle stops it.
pub struct MockServer {
    addr: SocketAddr,
    shared: Shared,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub async fn start(scenario: Scenario, addr: SocketAddr) -> Result<Self, MockError> {
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|source| MockError::Bind { addr, source })?;
        let addr = listener
            .local_addr()
            .map_err(|source| MockError::Bind { addr, source })?;
        let shared = Arc::new(Mutex::new(Inner {
            rules: rule_states(&scenario),
            scenario,
            captures: Vec::new(),
            served: 0,
        }));
        let app = Router::new()
            .route(CHAT_PATH, post(chat))
            .route(TEXT_PATH, post(text))
            .route(CAPTURES_PATH, get(captures))
            .with_state(shared.clone());
        let (tx, rx) = oneshot::channel();
        let task = tokio::spawn(async move {
            let server = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = server.await {
                tracing::error!("mock server stopped: {e}");
            }
        });
        Ok(Self {
            addr,
            shared,
            shutdown: Some(tx),
            task: Some(task),
        })
    }

    /// Starts on an ephemeral loopback port.
    pub async fn start_local(scenario: Scenario) -> Result<Self, MockError> {
        Self::start(scenario, SocketAddr::from(([127, 0, 0, 1], 0))).await
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn chat_url(&self) -> String {
        self.url(CHAT_PATH)
    }

    pub fn completions_url(&self) -> String {
        self.url(TEXT_PATH)
    }

    pub fn captures(&self) -> Vec<Capture> {
        self.shared
            .lock()
            .expect("mock state poisoned")
            .captures
            .clone()
    }

    /// Discards captures and rewinds status sequences, response cycles and
    /// random streams to their initial state.
    pub fn reset(&self) {
        let mut inner = self.shared.lock().expect("mock state poisoned");
        inner.rules = rule_states(&inner.scenario);
        inner.captures.clear();
        inner.served = 0;
    }

    pub async fn shutdown(mut self) {
        self.stop();
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    /// Waits until the server stops (it only stops via [`Self::shutdown`]
    /// or an I/O failure).
    pub async fn wait(mut self) {
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop();
    }
}
