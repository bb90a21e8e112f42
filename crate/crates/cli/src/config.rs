//! Optional TOML configuration. Any flag given on the command line wins
//! over the file; the file wins over built-in defaults.
//!
//! ```toml
//! api_url = "https://api.openai.com/v1/chat/completions"
//! model = "gpt-3.5-turbo"
//! sessions = 10
//! seed = 42
//! system_prompt = "You are a participant in a psycholinguistic experiment."
//! max_tokens = 80
//! logprobs = 5
//!
//! [extra]
//! presence_penalty = 0.5
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub api_url: Option<String>,
    pub model: Option<String>,
    pub mode: Option<String>,
    pub save_path: Option<PathBuf>,
    pub sessions: Option<u32>,
    pub random_item: Option<bool>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub min_interval_ms: Option<u64>,
    pub max_attempts: Option<u32>,
    pub timeout_secs: Option<u64>,
    pub system_prompt: Option<String>,
    pub max_tokens: Option<u32>,
    pub temperature: Option<f64>,
    pub n: Option<u32>,
    pub logprobs: Option<toml::Value>,
    pub top_logprobs: Option<u8>,
    pub img_detail: Option<String>,
    pub tokenizer_registry: Option<PathBuf>,
    pub context_limit: Option<usize>,
    pub message_overhead: Option<usize>,
    #[serde(default)]
    pub extra: toml::Table,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// `logprobs` as the string form accepted on the command line.
    pub fn logprobs_text(&self) -> Option<String> {
        self.logprobs.as_ref().map(|v| match v {
            toml::Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    }

    pub fn extra_json(&self) -> Result<serde_json::Map<String, serde_json::Value>> {
        let value = serde_json::to_value(&self.extra)
            .context("config [extra] is not representable as JSON")?;
        Ok(value.as_object().cloned().unwrap_or_default())
    }
}
