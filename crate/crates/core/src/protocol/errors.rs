use thiserror::Error;

use super::{ConversationError, ParamError};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid endpoint URL {0}")]
    InvalidUrl(String),
    #[error("request builder for {expected} mode used with a {actual} endpoint")]
    ModeMismatch {
        expected: super::EndpointMode,
        actual: super::EndpointMode,
    },
    #[error("invalid generation parameters: {0}")]
    InvalidParams(#[from] ParamError),
    #[error("{0} input is not supported by this endpoint")]
    UnsupportedModality(&'static str),
    #[error("image file not found: {0}")]
    ImageNotFound(String),
    #[error("conversation is not ready for a request: {0}")]
    Conversation(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("logprobs were requested but the response carries none")]
    LogprobsAbsent,
}

impl From<ConversationError> for ProtocolError {
    fn from(e: ConversationError) -> Self {
        ProtocolError::Conversation(e.to_string())
    }
}

/// A non-success HTTP status from the provider.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("HTTP {status}: {explanation}{}", detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default())]
pub struct ProviderError {
    pub status: u16,
    pub explanation: String,
    pub retryable: bool,
    /// Error message from the response body, when the provider sent one.
    pub detail: Option<String>,
}

impl ProviderError {
    pub fn with_detail(mut self, detail: Option<String>) -> Self {
        self.detail = detail;
        self
    }
}

pub fn handle_error_code(status: u16) -> ProviderError {
    let (explanation, retryable) = match status {
        400 => (
            "bad request: the request body is malformed or missing required fields",
            false,
        ),
        401 => ("invalid credentials: check the API key", false),
        403 => (
            "forbidden: the key is not allowed to use this model or endpoint",
            false,
        ),
        404 => ("not found: check the API URL and the model name", false),
        422 => (
            "unprocessable request: one or more generation parameters are invalid",
            false,
        ),
        429 => ("rate limit or quota exceeded: slow down and retry", true),
        500 => ("internal server error at the provider", true),
        502 => ("bad gateway: the provider's upstream failed", true),
        503 => (
            "service unavailable: the provider is overloaded or down",
            true,
        ),
        504 => ("gateway timeout: the provider did not answer in time", true),
        500..=599 => ("provider failure", false),
        _ => ("unexpected HTTP status", false),
    };
    ProviderError {
        status,
        explanation: explanation.to_string(),
        retryable,
        detail: None,
    }
}
