use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::EndpointMode;

pub const DEFAULT_MAX_TOKENS: u32 = 500;
pub const MAX_TEXT_LOGPROBS: u8 = 5;
pub const MAX_TOP_LOGPROBS: u8 = 20;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("top_logprobs requires logprobs to be enabled")]
    TopLogprobsWithoutLogprobs,
    #[error("top_logprobs must be between 0 and {MAX_TOP_LOGPROBS}, got {0}")]
    TopLogprobsRange(u8),
    #[error("top_logprobs is only available in chat completion mode")]
    TopLogprobsInTextMode,
    #[error("text completion logprobs must be at most {MAX_TEXT_LOGPROBS}, got {0}")]
    TextLogprobsRange(u8),
    #[error("n must be at least 1")]
    ZeroN,
    #[error("max_tokens must be at least 1")]
    ZeroMaxTokens,
    #[error("temperature must be a non-negative number, got {0}")]
    Temperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageDetail {
    Low,
    High,
    #[default]
    Auto,
}

impl ImageDetail {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageDetail::Low => "low",
            ImageDetail::High => "high",
            ImageDetail::Auto => "auto",
        }
    }
}

impl FromStr for ImageDetail {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "low" => Ok(ImageDetail::Low),
            "high" => Ok(ImageDetail::High),
            "auto" => Ok(ImageDetail::Auto),
            other => Err(format!(
                "unknown image detail {other:?} (expected low, high or auto)"
            )),
        }
    }
}

/// Log-probability request. Chat completion takes a boolean; text
/// completion takes the number of alternatives per position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Logprobs {
    #[default]
    Off,
    /// Chat `logprobs: true`; one alternative per position in text mode.
    On,
    Count(u8),
}

impl Logprobs {
    pub fn enabled(self) -> bool {
        !matches!(self, Logprobs::Off | Logprobs::Count(0))
    }

    /// Integer form for text completion requests.
    pub fn count(self) -> u8 {
        match self {
            Logprobs::Off => 0,
            Logprobs::On => 1,
            Logprobs::Count(k) => k,
        }
    }
}

impl FromStr for Logprobs {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "on" | "yes" => Ok(Logprobs::On),
            "false" | "off" | "no" => Ok(Logprobs::Off),
            n => n
                .parse::<u8>()
                .map(Logprobs::Count)
                .map_err(|_| format!("logprobs must be true, false or an integer, got {s:?}")),
        }
    }
}

impl fmt::Display for Logprobs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Logprobs::Off => f.write_str("false"),
            Logprobs::On => f.write_str("true"),
            Logprobs::Count(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationParams {
    pub system_prompt: String,
    pub max_tokens: u32,
    /// `None` leaves the provider default in effect.
    pub temperature: Option<f64>,
    pub n: u32,
    pub logprobs: Logprobs,
    pub top_logprobs: Option<u8>,
    pub img_detail: ImageDetail,
    /// Extra request fields, merged after the standard ones.
    pub extra: Map<String, Value>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            system_prompt: String::new(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: None,
            n: 1,
            logprobs: Logprobs::Off,
            top_logprobs: None,
            img_detail: ImageDetail::Auto,
            extra: Map::new(),
        }
    }
}

impl GenerationParams {
    pub fn validate(&self, mode: EndpointMode) -> Result<(), ParamError> {
        if self.n == 0 {
            return Err(ParamError::ZeroN);
        }
        if self.max_tokens == 0 {
            return Err(ParamError::ZeroMaxTokens);
        }
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t >= 0.0) {
                return Err(ParamError::Temperature(t));
            }
        }
        let top = self.top_logprobs.unwrap_or(0);
        match mode {
            EndpointMode::Chat => {
                if top > MAX_TOP_LOGPROBS {
                    return Err(ParamError::TopLogprobsRange(top));
                }
                if top > 0 && !self.logprobs.enabled() {
                    return Err(ParamError::TopLogprobsWithoutLogprobs);
                }
            }
            EndpointMode::Text => {
                if top > 0 {
                    return Err(ParamError::TopLogprobsInTextMode);
                }
                if self.logprobs.count() > MAX_TEXT_LOGPROBS {
                    return Err(ParamError::TextLogprobsRange(self.logprobs.count()));
                }
            }
        }
        Ok(())
    }

    /// Copy with `n` forced to 1, for designs where several choices would
    /// branch the conversation.
    pub fn single_choice(&self) -> Self {
        Self {
            n: 1,
            ..self.clone()
        }
    }
}
