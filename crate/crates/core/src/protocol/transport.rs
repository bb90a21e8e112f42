use std::time::Duration;

use rand::Rng;
use reqwest::header::{HeaderMap, AUTHORIZATION, CONTENT_TYPE, RETRY_AFTER};
use serde_json::Value;
use thiserror::Error;

use super::{handle_error_code, EndpointConfig, ProtocolError, ProviderError};

/// Exponential backoff with bounded jitter.
///
/// The delay before retry `k` (0-based) is drawn from
/// `[base * factor^k, base * factor^(k+1))`, capped at `max_delay`, so the
/// sequence of delays never decreases.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts including the first request.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
    pub max_delay: Duration,
    pub jitter: bool,
    pub honor_retry_after: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            max_delay: Duration::from_secs(60),
            jitter: true,
            honor_retry_after: true,
        }
    }
}

impl RetryPolicy {
    pub fn no_retry() -> Self {
        Self {
            max_attempts: 1,
            ..Self::default()
        }
    }

    /// Backoff before retry `retry` given a jitter draw `unit` in `[0, 1)`.
    pub fn backoff(&self, retry: u32, unit: f64) -> Duration {
        let factor = self.factor.max(1.0);
        let floor = self.base_delay.as_secs_f64() * factor.powi(retry as i32);
        let unit = if self.jitter {
            unit.clamp(0.0, 1.0)
        } else {
            0.0
        };
        let secs = floor * (1.0 + (factor - 1.0) * unit);
        Duration::from_secs_f64(secs.min(self.max_delay.as_secs_f64()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawResponse {
    pub status: u16,
    /// Response body exactly as received.
    pub body: String,
    pub attempts: u32,
}

#[derive(Debug, Error)]
pub enum SendError {
    #[error("{error} after {attempts} attempt(s)")]
    Provider { error: ProviderError, attempts: u32 },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
}

impl SendError {
    pub fn attempts(&self) -> u32 {
        match self {
            SendError::Provider { attempts, .. } | SendError::Transport { attempts, .. } => {
                *attempts
            }
        }
    }
}

fn retry_after(headers: &HeaderMap) -> Option<Duration> {
    let value = headers.get(RETRY_AFTER)?.to_str().ok()?.trim();
    value
        .parse::<f64>()
        .ok()
        .filter(|s| s.is_finite() && *s >= 0.0)
        .map(Duration::from_secs_f64)
}

fn error_detail(body: &str) -> Option<String> {
    let payload: Value = serde_json::from_str(body).ok()?;
    payload
        .pointer("/error/message")
        .or_else(|| payload.get("message"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

enum Outcome {
    Done(RawResponse),
    Fatal(SendError),
    Retry {
        error: SendError,
        hint: Option<Duration>,
    },
}

/// Sends request bodies to one endpoint, retrying transient failures.
#[derive(Debug, Clone)]
pub struct ProviderClient {
    http: reqwest::Client,
    cfg: EndpointConfig,
    retry: RetryPolicy,
}

impl ProviderClient {
    pub fn new(cfg: EndpointConfig, retry: RetryPolicy) -> Result<Self, ProtocolError> {
        Self::with_timeout(cfg, retry, Duration::from_secs(120))
    }

    pub fn with_timeout(
        cfg: EndpointConfig,
        retry: RetryPolicy,
        timeout: Duration,
    ) -> Result<Self, ProtocolError> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProtocolError::InvalidUrl(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { http, cfg, retry })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn retry_policy(&self) -> &RetryPolicy {
        &self.retry
    }

    async fn attempt(&self, body: &str, attempts: u32) -> Outcome {
        let mut request = self
            .http
            .post(self.cfg.api_url.clone())
            .header(CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(key) = self.cfg.api_key() {
            request = request.header(AUTHORIZATION, format!("Bearer {key}"));
        }
        let response = match request.send().await {
            Ok(r) => r,
            Err(e) => {
                return Outcome::Retry {
                    error: SendError::Transport {
                        message: e.to_string(),
                        attempts,
                    },
                    hint: None,
                }
            }
        };
        let status = response.status().as_u16();
        let hint = retry_after(response.headers());
        let text = match response.text().await {
            Ok(t) => t,
            Err(e) => {
                return Outcome::Retry {
                    error: SendError::Transport {
                        message: e.to_string(),
                        attempts,
                    },
                    hint: None,
                }
            }
        };
        if (200..300).contains(&status) {
            return Outcome::Done(RawResponse {
                status,
                body: text,
                attempts,
            });
        }
        let error = handle_error_code(status).with_detail(error_detail(&text));
        let retryable = error.retryable;
        let error = SendError::Provider { error, attempts };
        if retryable {
            Outcome::Retry { error, hint }
        } else {
            Outcome::Fatal(error)
        }
    }

    /// Posts `body` verbatim. Retryable statuses (429, 500, 502-504) and
    /// transport failures are retried up to the policy's attempt limit.
    pub async fn send(&self, body: &str) -> Result<RawResponse, SendError> {
        let max_attempts = self.retry.max_attempts.max(1);
        let mut previous_delay = Duration::ZERO;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(body, attempts).await {
                Outcome::Done(raw) => return Ok(raw),
                Outcome::Fatal(err) => return Err(err),
                Outcome::Retry { error, hint } => {
                    if attempts >= max_attempts {
                        return Err(error);
                    }
                    let unit: f64 = rand::rng().random();
                    let mut delay = self.retry.backoff(attempts - 1, unit);
                    if self.retry.honor_retry_after {
                        if let Some(hint) = hint {
                            delay = delay.max(hint);
                        }
                    }
                    delay = delay.max(previous_delay);
                    previous_delay = delay;
                    tracing::debug!(attempt = attempts, ?delay, %error, "retrying request");
                    tokio::time::sleep(delay).await;
                }
            }
        }
    }
}
