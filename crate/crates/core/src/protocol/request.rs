//! Request bodies.
//!
//! Keys are emitted in a fixed order so identical inputs produce
//! byte-identical bodies:
//!
//! - chat: `model, messages, max_tokens, temperature?, n, logprobs?, top_logprobs?`
//! - text: `model, prompt, max_tokens, temperature?, n, logprobs?`
//!
//! followed by passthrough fields in their configured order. A passthrough
//! field replaces a standard one of the same name in place, except `model`,
//! `messages` and `prompt`, which are never overridden.

use std::path::Path;

use base64::Engine;
use serde_json::{json, Map, Value};

use super::{
    Conversation, EndpointConfig, EndpointMode, GenerationParams, ImageDetail, ProtocolError,
};
use crate::stimuli::ContentSegment;

const PROTECTED_KEYS: [&str; 3] = ["model", "messages", "prompt"];

fn is_url(locator: &str) -> bool {
    ["http://", "https://", "data:"].iter().any(|scheme| {
        locator.len() >= scheme.len() && locator[..scheme.len()].eq_ignore_ascii_case(scheme)
    })
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

/// URLs pass through; file paths are inlined as base64 data URLs.
fn image_url(locator: &str) -> Result<String, ProtocolError> {
    let locator = locator.trim();
    if is_url(locator) {
        return Ok(locator.to_string());
    }
    let path = Path::new(locator);
    let bytes =
        std::fs::read(path).map_err(|_| ProtocolError::ImageNotFound(locator.to_string()))?;
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{};base64,{encoded}", mime_for(path)))
}

fn render_content(
    segments: &[ContentSegment],
    default_detail: ImageDetail,
) -> Result<Value, ProtocolError> {
    let parts: Vec<&ContentSegment> = segments.iter().filter(|s| !s.is_filler()).collect();
    if parts
        .iter()
        .any(|s| matches!(s, ContentSegment::Audio { .. }))
    {
        return Err(ProtocolError::UnsupportedModality("audio"));
    }
    if let [ContentSegment::Text { text, .. }] = parts.as_slice() {
        return Ok(Value::String(text.clone()));
    }
    let rendered = parts
        .into_iter()
        .map(|segment| match segment {
            ContentSegment::Text { text, .. } => Ok(json!({"type": "text", "text": text})),
            ContentSegment::Image { locator, detail } => Ok(json!({
                "type": "image_url",
                "image_url": {
                    "url": image_url(locator)?,
                    "detail": detail.unwrap_or(default_detail).as_str(),
                },
            })),
            ContentSegment::Audio { .. } => unreachable!("rejected above"),
        })
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    Ok(Value::Array(rendered))
}

/// The `messages` array as it is sent.
pub fn messages_json(conv: &Conversation, detail: ImageDetail) -> Result<Value, ProtocolError> {
    conv.messages()
        .iter()
        .map(|m| {
            Ok(json!({
                "role": m.role.as_str(),
                "content": render_content(&m.content, detail)?,
            }))
        })
        .collect::<Result<Vec<_>, ProtocolError>>()
        .map(Value::Array)
}

/// Text-completion preamble for a prompt; only text content is allowed.
pub fn text_prompt(segments: &[ContentSegment]) -> Result<String, ProtocolError> {
    let mut prompt = String::new();
    for segment in segments {
        match segment {
            ContentSegment::Text { text, .. } => prompt.push_str(text),
            ContentSegment::Image { .. } => {
                return Err(ProtocolError::UnsupportedModality("image"))
            }
            ContentSegment::Audio { .. } => {
                return Err(ProtocolError::UnsupportedModality("audio"))
            }
        }
    }
    Ok(prompt)
}

fn merge_passthrough(body: &mut Map<String, Value>, extra: &Map<String, Value>) {
    for (key, value) in extra {
        if PROTECTED_KEYS.contains(&key.as_str()) {
            tracing::warn!(
                key,
                "ignoring passthrough field that would replace request content"
            );
            continue;
        }
        body.insert(key.clone(), value.clone());
    }
}

fn check_mode(cfg: &EndpointConfig, expected: EndpointMode) -> Result<(), ProtocolError> {
    if cfg.mode != expected {
        return Err(ProtocolError::ModeMismatch {
            expected,
            actual: cfg.mode,
        });
    }
    Ok(())
}

pub fn build_chat_request(
    cfg: &EndpointConfig,
    conv: &Conversation,
    params: &GenerationParams,
) -> Result<Value, ProtocolError> {
    check_mode(cfg, EndpointMode::Chat)?;
    params.validate(EndpointMode::Chat)?;
    if !conv.is_request_ready() {
        return Err(ProtocolError::Conversation(
            "expected [system] (user assistant)* user".into(),
        ));
    }

    let mut body = Map::new();
    body.insert("model".into(), json!(cfg.model));
    body.insert("messages".into(), messages_json(conv, params.img_detail)?);
    body.insert("max_tokens".into(), json!(params.max_tokens));
    if let Some(t) = params.temperature {
        body.insert("temperature".into(), json!(t));
    }
    body.insert("n".into(), json!(params.n));
    if params.logprobs.enabled() {
        body.insert("logprobs".into(), json!(true));
        if let Some(k) = params.top_logprobs {
            body.insert("top_logprobs".into(), json!(k));
        }
    }
    merge_passthrough(&mut body, &params.extra);
    Ok(Value::Object(body))
}

pub fn build_text_request(
    cfg: &EndpointConfig,
    prompt: &str,
    params: &GenerationParams,
) -> Result<Value, ProtocolError> {
    check_mode(cfg, EndpointMode::Text)?;
    params.validate(EndpointMode::Text)?;

    let mut body = Map::new();
    body.insert("model".into(), json!(cfg.model));
    body.insert("prompt".into(), json!(prompt));
    body.insert("max_tokens".into(), json!(params.max_tokens));
    if let Some(t) = params.temperature {
        body.insert("temperature".into(), json!(t));
    }
    body.insert("n".into(), json!(params.n));
    if params.logprobs.count() > 0 {
        body.insert("logprobs".into(), json!(params.logprobs.count()));
    }
    merge_passthrough(&mut body, &params.extra);
    Ok(Value::Object(body))
}

/// Compact serialization used on the wire and in result files.
pub fn render_body(body: &Value) -> String {
    serde_json::to_string(body).expect("JSON values always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Logprobs, ParamError, Role};
    use crate::stimuli::parse_prompt_segments;

    fn chat_cfg() -> EndpointConfig {
        EndpointConfig::new(
            None,
            "http://localhost:8000/v1/chat/completions",
            "gpt-3.5-turbo",
        )
        .unwrap()
    }

    fn text_cfg() -> EndpointConfig {
        EndpointConfig::new(None, "http://localhost:8000/v1/completions", "davinci-002").unwrap()
    }

    fn conv(messages: &[(Role, &str)]) -> Conversation {
        messages
            .iter()
            .fold(Conversation::new(), |c, (role, text)| {
                c.add_message(*role, parse_prompt_segments(text).unwrap())
                    .unwrap()
            })
    }

    const PELCRA: &str = "Please repeat the fragment and complete it into a full sentence: Although Pelcra was sick ...";

    #[test]
    fn system_and_user_messages_in_order() {
        let c = conv(&[
            (
                Role::System,
                "You are a participant in a psycholinguistic experiment.",
            ),
            (Role::User, PELCRA),
        ]);
        let body = build_chat_request(&chat_cfg(), &c, &GenerationParams::default()).unwrap();
        assert_eq!(
            render_body(&body),
            format!(
                r#"{{"model":"gpt-3.5-turbo","messages":[{{"role":"system","content":"You are a participant in a psycholinguistic experiment."}},{{"role":"user","content":"{PELCRA}"}}],"max_tokens":500,"n":1}}"#
            )
        );
    }

    #[test]
    fn logprobs_and_top_logprobs() {
        let params = GenerationParams {
            logprobs: Logprobs::On,
            top_logprobs: Some(2),
            ..Default::default()
        };
        let body =
            build_chat_request(&chat_cfg(), &conv(&[(Role::User, "Hello")]), &params).unwrap();
        assert_eq!(body["logprobs"], json!(true));
        assert_eq!(body["top_logprobs"], json!(2));
        let keys: Vec<&String> = body.as_object().unwrap().keys().collect();
        assert_eq!(
            keys,
            [
                "model",
                "messages",
                "max_tokens",
                "n",
                "logprobs",
                "top_logprobs"
            ]
        );
    }

    #[test]
    fn temperature_omitted_unless_set() {
        let c = conv(&[(Role::User, "hi")]);
        let body = build_chat_request(&chat_cfg(), &c, &GenerationParams::default()).unwrap();
        assert!(body.get("temperature").is_none());
        let params = GenerationParams {
            temperature: Some(0.7),
            ..Default::default()
        };
        let body = build_chat_request(&chat_cfg(), &c, &params).unwrap();
        assert_eq!(body["temperature"], json!(0.7));
    }

    #[test]
    fn multimodal_content_array() {
        let c = conv(&[(
            Role::User,
            "<text>Describe this.</text> <img>https://x/y.png</img>",
        )]);
        let params = GenerationParams {
            img_detail: ImageDetail::Low,
            ..Default::default()
        };
        let body = build_chat_request(&chat_cfg(), &c, &params).unwrap();
        assert_eq!(
            body["messages"][0]["content"],
            json!([
                {"type": "text", "text": "Describe this."},
                {"type": "image_url", "image_url": {"url": "https://x/y.png", "detail": "low"}},
            ])
        );
    }

    #[test]
    fn image_files_become_data_urls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pic.png");
        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        let c = conv(&[(Role::User, &format!("<img>{}</img>", path.display()))]);
        let body = build_chat_request(&chat_cfg(), &c, &GenerationParams::default()).unwrap();
        assert_eq!(
            body["messages"][0]["content"][0]["image_url"]["url"],
            json!("data:image/png;base64,AQID")
        );

        let missing = conv(&[(Role::User, "<img>/no/such/file.png</img>")]);
        assert!(matches!(
            build_chat_request(&chat_cfg(), &missing, &GenerationParams::default()),
            Err(ProtocolError::ImageNotFound(_))
        ));
    }

    #[test]
    fn audio_is_rejected() {
        let c = conv(&[(Role::User, "<audio>clip.wav</audio>")]);
        assert!(matches!(
            build_chat_request(&chat_cfg(), &c, &GenerationParams::default()),
            Err(ProtocolError::UnsupportedModality("audio"))
        ));
    }

    #[test]
    fn mode_mismatch() {
        let c = conv(&[(Role::User, "hi")]);
        assert!(matches!(
            build_chat_request(&text_cfg(), &c, &GenerationParams::default()),
            Err(ProtocolError::ModeMismatch { .. })
        ));
        assert!(matches!(
            build_text_request(&chat_cfg(), "hi", &GenerationParams::default()),
            Err(ProtocolError::ModeMismatch { .. })
        ));
    }

    #[test]
    fn text_request_logprobs() {
        let params = GenerationParams {
            logprobs: Logprobs::Count(5),
            ..Default::default()
        };
        let body = build_text_request(&text_cfg(), "Although Pelcra was sick", &params).unwrap();
        assert_eq!(body["logprobs"], json!(5));
        assert_eq!(body["prompt"], json!("Although Pelcra was sick"));

        let body = build_text_request(&text_cfg(), "x", &GenerationParams::default()).unwrap();
        assert!(body.get("logprobs").is_none());

        let params = GenerationParams {
            logprobs: Logprobs::Count(6),
            ..Default::default()
        };
        assert!(matches!(
            build_text_request(&text_cfg(), "x", &params),
            Err(ProtocolError::InvalidParams(ParamError::TextLogprobsRange(
                6
            )))
        ));
    }

    #[test]
    fn passthrough_cannot_replace_content() {
        let mut extra = Map::new();
        extra.insert("model".into(), json!("other"));
        extra.insert("messages".into(), json!([]));
        extra.insert("max_tokens".into(), json!(7));
        extra.insert("stop".into(), json!(["\n"]));
        let params = GenerationParams {
            extra,
            ..Default::default()
        };
        let body = build_chat_request(&chat_cfg(), &conv(&[(Role::User, "hi")]), &params).unwrap();
        assert_eq!(body["model"], json!("gpt-3.5-turbo"));
        assert_eq!(body["messages"].as_array().unwrap().len(), 1);
        assert_eq!(body["max_tokens"], json!(7));
        let keys: Vec<&String> = body.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["model", "messages", "max_tokens", "n", "stop"]);
    }

    #[test]
    fn request_must_end_with_user_turn() {
        let c = conv(&[(Role::System, "s")]);
        assert!(matches!(
            build_chat_request(&chat_cfg(), &c, &GenerationParams::default()),
            Err(ProtocolError::Conversation(_))
        ));
    }

    #[test]
    fn identical_inputs_give_identical_bytes() {
        let c = conv(&[
            (Role::System, "s"),
            (Role::User, "<text>a</text><img>https://h/i.png</img>"),
        ]);
        let params = GenerationParams {
            temperature: Some(0.25),
            logprobs: Logprobs::On,
            top_logprobs: Some(3),
            ..Default::default()
        };
        let a = render_body(&build_chat_request(&chat_cfg(), &c, &params).unwrap());
        let b = render_body(&build_chat_request(&chat_cfg(), &c.clone(), &params.clone()).unwrap());
        assert_eq!(a, b);
    }
}
