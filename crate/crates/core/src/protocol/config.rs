use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use url::Url;

use super::ProtocolError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointMode {
    Chat,
    Text,
}

impl EndpointMode {
    /// Chat iff the URL path ends with `/chat/completions`.
    pub fn infer(url: &Url) -> Self {
        if url
            .path()
            .trim_end_matches('/')
            .ends_with("/chat/completions")
        {
            EndpointMode::Chat
        } else {
            EndpointMode::Text
        }
    }
}

impl FromStr for EndpointMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "chat" => Ok(EndpointMode::Chat),
            "text" => Ok(EndpointMode::Text),
            other => Err(format!("unknown mode {other:?} (expected chat or text)")),
        }
    }
}

impl fmt::Display for EndpointMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EndpointMode::Chat => "chat",
            EndpointMode::Text => "text",
        })
    }
}

#[derive(Clone)]
pub struct EndpointConfig {
    api_key: Option<String>,
    pub api_url: Url,
    pub model: String,
    pub mode: EndpointMode,
}

impl EndpointConfig {
    /// A key of `NA` (any case) or an empty key means no key, as for
    /// self-hosted servers.
    pub fn new(
        api_key: Option<String>,
        api_url: &str,
        model: impl Into<String>,
    ) -> Result<Self, ProtocolError> {
        let api_url = Url::parse(api_url)
            .map_err(|e| ProtocolError::InvalidUrl(format!("{api_url}: {e}")))?;
        if !matches!(api_url.scheme(), "http" | "https") {
            return Err(ProtocolError::InvalidUrl(format!(
                "{api_url}: scheme must be http or https"
            )));
        }
        let api_key = api_key
            .map(|k| k.trim().to_string())
            .filter(|k| !k.is_empty() && !k.eq_ignore_ascii_case("NA"));
        Ok(Self {
            mode: EndpointMode::infer(&api_url),
            api_key,
            api_url,
            model: model.into(),
        })
    }

    pub fn with_mode(mut self, mode: EndpointMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn api_key(&self) -> Option<&str> {
        self.api_key.as_deref()
    }
}

impl fmt::Debug for EndpointConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EndpointConfig")
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("api_url", &self.api_url.as_str())
            .field("model", &self.model)
            .field("mode", &self.mode)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_follows_url_path() {
        let chat = EndpointConfig::new(
            None,
            "https://api.openai.com/v1/chat/completions",
            "gpt-3.5-turbo",
        )
        .unwrap();
        assert_eq!(chat.mode, EndpointMode::Chat);
        let text = EndpointConfig::new(
            None,
            "https://api.openai.com/v1/completions",
            "gpt-3.5-turbo-instruct",
        )
        .unwrap();
        assert_eq!(text.mode, EndpointMode::Text);
        let local =
            EndpointConfig::new(None, "http://localhost:8000/v1/chat/completions/", "vicuna")
                .unwrap();
        assert_eq!(local.mode, EndpointMode::Chat);
        assert_eq!(text.with_mode(EndpointMode::Chat).mode, EndpointMode::Chat);
    }

    #[test]
    fn na_key_means_no_key() {
        let cfg = EndpointConfig::new(
            Some("NA".into()),
            "http://localhost:8000/v1/completions",
            "m",
        )
        .unwrap();
        assert_eq!(cfg.api_key(), None);
        let cfg = EndpointConfig::new(
            Some("sk-secret".into()),
            "http://localhost:8000/v1/completions",
            "m",
        )
        .unwrap();
        assert_eq!(cfg.api_key(), Some("sk-secret"));
        assert!(!format!("{cfg:?}").contains("sk-secret"));
    }

    #[test]
    fn rejects_non_http_urls() {
        assert!(EndpointConfig::new(None, "ftp://x/v1/completions", "m").is_err());
        assert!(EndpointConfig::new(None, "not a url", "m").is_err());
    }
}
