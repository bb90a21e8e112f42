//! Decoding completion responses.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{EndpointMode, ProtocolError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub index: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    /// Natural-log probability.
    pub logprob: f64,
}

impl TokenLogprob {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self {
            token: token.into(),
            logprob,
        }
    }

    pub fn probability(&self) -> f64 {
        self.logprob.exp()
    }
}

fn malformed(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::MalformedResponse(msg.into())
}

fn parse(raw: &str) -> Result<Value, ProtocolError> {
    serde_json::from_str(raw).map_err(|e| malformed(format!("not JSON: {e}")))
}

fn choices(payload: &Value) -> Result<&Vec<Value>, ProtocolError> {
    payload
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing \"choices\" array"))
}

pub fn extract_completions(
    raw: &str,
    mode: EndpointMode,
) -> Result<Vec<Completion>, ProtocolError> {
    let payload = parse(raw)?;
    let choices = choices(&payload)?;
    if choices.is_empty() {
        return Err(malformed("\"choices\" is empty"));
    }
    choices
        .iter()
        .enumerate()
        .map(|(position, choice)| {
            let index = match choice.get("index") {
                Some(v) => v
                    .as_u64()
                    .and_then(|i| u32::try_from(i).ok())
                    .ok_or_else(|| malformed(format!("choice {position}: bad index")))?,
                None => position as u32,
            };
            let text = match mode {
                EndpointMode::Chat => choice.pointer("/message/content"),
                EndpointMode::Text => choice.get("text"),
            }
            .and_then(Value::as_str)
            .ok_or_else(|| malformed(format!("choice {position}: missing content")))?;
            Ok(Completion {
                index,
                text: text.to_string(),
            })
        })
        .collect()
}

fn candidate(entry: &Value) -> Result<TokenLogprob, ProtocolError> {
    let token = entry
        .get("token")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("logprob entry without token"))?;
    let logprob = entry
        .get("logprob")
        .and_then(Value::as_f64)
        .ok_or_else(|| malformed("logprob entry without logprob"))?;
    Ok(TokenLogprob::new(token, logprob))
}

fn chat_positions(logprobs: &Value) -> Result<Vec<Vec<TokenLogprob>>, ProtocolError> {
    let content = logprobs
        .get("content")
        .and_then(Value::as_array)
        .ok_or(ProtocolError::LogprobsAbsent)?;
    content
        .iter()
        .map(
            |position| match position.get("top_logprobs").and_then(Value::as_array) {
                Some(top) if !top.is_empty() => top.iter().map(candidate).collect(),
                _ => Ok(vec![candidate(position)?]),
            },
        )
        .collect()
}

fn text_positions(logprobs: &Value) -> Result<Vec<Vec<TokenLogprob>>, ProtocolError> {
    if let Some(top) = logprobs.get("top_logprobs").and_then(Value::as_array) {
        return top
            .iter()
            .map(|position| {
                let map = position
                    .as_object()
                    .ok_or_else(|| malformed("top_logprobs entry is not an object"))?;
                map.iter()
                    .map(|(token, lp)| {
                        lp.as_f64()
                            .map(|lp| TokenLogprob::new(token.clone(), lp))
                            .ok_or_else(|| malformed("non-numeric logprob"))
                    })
                    .collect()
            })
            .collect();
    }
    let tokens = logprobs.get("tokens").and_then(Value::as_array);
    let values = logprobs.get("token_logprobs").and_then(Value::as_array);
    let (Some(tokens), Some(values)) = (tokens, values) else {
        return Err(ProtocolError::LogprobsAbsent);
    };
    tokens
        .iter()
        .zip(values)
        .map(|(t, v)| match (t.as_str(), v.as_f64()) {
            (Some(t), Some(v)) => Ok(vec![TokenLogprob::new(t, v)]),
            _ => Err(malformed("bad tokens/token_logprobs entry")),
        })
        .collect()
}

/// Candidates per output position for the choice with the given index.
///
/// Chat responses yield each position's `top_logprobs` (or the sampled
/// token alone when no alternatives were requested); text responses yield
/// the provider's top-k map per position.
pub fn extract_choice_logprobs(
    raw: &str,
    mode: EndpointMode,
    choice_index: u32,
) -> Result<Vec<Vec<TokenLogprob>>, ProtocolError> {
    let payload = parse(raw)?;
    let choices = choices(&payload)?;
    let choice = choices
        .iter()
        .enumerate()
        .find(|(position, c)| {
            c.get("index")
                .and_then(Value::as_u64)
                .unwrap_or(*position as u64)
                == u64::from(choice_index)
        })
        .map(|(_, c)| c)
        .ok_or_else(|| malformed(format!("no choice with index {choice_index}")))?;
    let logprobs = choice
        .get("logprobs")
        .filter(|v| !v.is_null())
        .ok_or(ProtocolError::LogprobsAbsent)?;
    match mode {
        EndpointMode::Chat => chat_positions(logprobs),
        EndpointMode::Text => text_positions(logprobs),
    }
}

/// [`extract_choice_logprobs`] for the first choice.
pub fn extract_logprobs(
    raw: &str,
    mode: EndpointMode,
) -> Result<Vec<Vec<TokenLogprob>>, ProtocolError> {
    extract_choice_logprobs(raw, mode, 0)
}
