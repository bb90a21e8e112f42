//! Scenario files: which requests get which replies.
//!
//! ```json
//! {
//!   "seed": 7,
//!   "rules": [
//!     {
//!       "match": {"contains": "Pelcra"},
//!       "responses": ["Although Pelcra was sick, she remained determined."],
//!       "status_sequence": [429, 200],
//!       "latency_ms": 5,
//!       "retry_after": 0
//!     },
//!     {
//!       "match": {"regex": "(?i)corlak"},
//!       "responses": [{"distribution": [{"text": "he left", "p": 0.8}, {"text": "she left", "p": 0.2}]}]
//!     }
//!   ],
//!   "default_response": {"text": " she", "logprobs": [{" she": 0.3, " he": 0.4, " they": 0.3}]}
//! }
//! ```
//!
//! A response is either a bare string, an object with `text`, or an object
//! with `distribution`. Both object forms accept an optional `logprobs`
//! table, one map of token to probability per output position.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::Rng;
use regex::Regex;
use serde::Deserialize;
use serde_json::Map;
use thiserror::Error;

const PROBABILITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("scenario parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("rule {rule}: {message}")]
    Rule { rule: usize, message: String },
    #[error("{context}: {message}")]
    Response { context: String, message: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatcherSpec {
    Contains(String),
    Regex(String),
}

#[derive(Debug, Clone)]
pub enum Matcher {
    Contains(String),
    Regex(Regex),
}

impl Matcher {
    pub fn is_match(&self, text: &str) -> bool {
        match self {
            Matcher::Contains(needle) => text.contains(needle.as_str()),
            Matcher::Regex(re) => re.is_match(text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Choice {
    pub text: String,
    pub p: f64,
}

/// Probabilities per output position, in file order.
pub type LogprobTable = Vec<Vec<(String, f64)>>;

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ResponseSpec {
    Text(String),
    Fixed {
        text: String,
        #[serde(default)]
        logprobs: Option<Vec<Map<String, serde_json::Value>>>,
    },
    Stochastic {
        distribution: Vec<Choice>,
        #[serde(default)]
        logprobs: Option<Vec<Map<String, serde_json::Value>>>,
    },
}

#[derive(Debug, Clone)]
pub enum ResponseBody {
    Fixed(String),
    Distribution(Vec<Choice>),
}

#[derive(Debug, Clone)]
pub struct ScriptedResponse {
    pub body: ResponseBody,
    pub logprobs: Option<LogprobTable>,
}

impl ScriptedResponse {
    pub fn fixed(text: impl Into<String>) -> Self {
        Self {
            body: ResponseBody::Fixed(text.into()),
            logprobs: None,
        }
    }

    pub fn distribution(choices: Vec<Choice>) -> Result<Self, ScenarioError> {
        let spec = ResponseSpec::Stochastic {
            distribution: choices,
            logprobs: None,
        };
        Self::from_spec(spec, "distribution")
    }

    pub fn with_logprobs(mut self, table: LogprobTable) -> Result<Self, ScenarioError> {
        check_table(&table, "logprobs")?;
        self.logprobs = Some(table);
        Ok(self)
    }

    /// Text for the next choice, drawing from `rng` only when stochastic.
    pub fn emit<R: Rng>(&self, rng: &mut R) -> String {
        match &self.body {
            ResponseBody::Fixed(text) => text.clone(),
            ResponseBody::Distribution(choices) => stochastic_emit(choices, rng).to_string(),
        }
    }

    fn from_spec(spec: ResponseSpec, context: &str) -> Result<Self, ScenarioError> {
        let err = |message: String| ScenarioError::Response {
            context: context.to_string(),
            message,
        };
        let (body, raw_table) = match spec {
            ResponseSpec::Text(text) => (ResponseBody::Fixed(text), None),
            ResponseSpec::Fixed { text, logprobs } => (ResponseBody::Fixed(text), logprobs),
            ResponseSpec::Stochastic {
                distribution,
                logprobs,
            } => {
                if distribution.is_empty() {
                    return Err(err("distribution is empty".into()));
                }
                if let Some(c) = distribution.iter().find(|c| !(0.0..=1.0).contains(&c.p)) {
                    return Err(err(format!(
                        "probability {} for {:?} is outside [0, 1]",
                        c.p, c.text
                    )));
                }
                let total: f64 = distribution.iter().map(|c| c.p).sum();
                if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
                    return Err(err(format!("probabilities sum to {total}, not 1")));
                }
                (ResponseBody::Distribution(distribution), logprobs)
            }
        };
        let logprobs = match raw_table {
            None => None,
            Some(positions) => {
                let mut table = Vec::with_capacity(positions.len());
                for position in positions {
                    let mut entries = Vec::with_capacity(position.len());
                    for (token, value) in position {
                        let p = value.as_f64().ok_or_else(|| {
                            err(format!("probability for {token:?} is not a number"))
                        })?;
                        entries.push((token, p));
                    }
                    table.push(entries);
                }
                check_table(&table, context)?;
                Some(table)
            }
        };
        Ok(Self { body, logprobs })
    }
}

fn check_table(table: &LogprobTable, context: &str) -> Result<(), ScenarioError> {
    for (token, p) in table.iter().flatten() {
        // ln(0) has no JSON representation, so zero is rejected here.
        if !(*p > 0.0 && *p <= 1.0) {
            return Err(ScenarioError::Response {
                context: context.to_string(),
                message: format!("logprob table probability {p} for {token:?} is outside (0, 1]"),
            });
        }
    }
    Ok(())
}

/// Draws one text from a categorical distribution.
pub fn stochastic_emit<'a, R: Rng>(choices: &'a [Choice], rng: &mut R) -> &'a str {
    let index = WeightedIndex::new(choices.iter().map(|c| c.p))
        .map(|w| w.sample(rng))
        .unwrap_or(0);
    &choices[index].text
}

#[derive(Debug, Deserialize)]
struct RuleSpec {
    #[serde(rename = "match")]
    matcher: MatcherSpec,
    responses: Vec<ResponseSpec>,
    #[serde(default)]
    status_sequence: Vec<u16>,
    #[serde(default)]
    latency_ms: Option<u64>,
    #[serde(default)]
    retry_after: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct ScenarioSpec {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    rules: Vec<RuleSpec>,
    default_response: ResponseSpec,
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub matcher: Matcher,
    /// Cycled through on successive successful choices.
    pub responses: Vec<ScriptedResponse>,
    /// Consumed one status per request; 200 once exhausted.
    pub status_sequence: Vec<u16>,
    pub latency_ms: Option<u64>,
    /// Seconds sent in a `Retry-After` header on non-200 replies.
    pub retry_after: Option<u64>,
}

impl Rule {
    pub fn new(matcher: Matcher, responses: Vec<ScriptedResponse>) -> Self {
        Self {
            matcher,
            responses,
            status_sequence: Vec::new(),
            latency_ms: None,
            retry_after: None,
        }
    }

    pub fn with_statuses(mut self, statuses: Vec<u16>) -> Self {
        self.status_sequence = statuses;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub rules: Vec<Rule>,
    pub default_response: ScriptedResponse,
    pub seed: u64,
}

impl Scenario {
    /// Replies with `text` to everything.
    pub fn constant(text: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default_response: ScriptedResponse::fixed(text),
            seed: 0,
        }
    }

    pub fn from_json(source: &str) -> Result<Self, ScenarioError> {
        let spec: ScenarioSpec =
            serde_json::from_str(source).map_err(|e| ScenarioError::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        let mut rules = Vec::with_capacity(spec.rules.len());
        for (index, rule) in spec.rules.into_iter().enumerate() {
            let rule_err = |message: String| ScenarioError::Rule {
                rule: index,
                message,
            };
            let matcher = match rule.matcher {
                MatcherSpec::Contains(s) => Matcher::Contains(s),
                MatcherSpec::Regex(p) => {
                    Matcher::Regex(Regex::new(&p).map_err(|e| rule_err(e.to_string()))?)
                }
            };
            if rule.responses.is_empty() {
                return Err(rule_err("responses is empty".into()));
            }
            if let Some(s) = rule
                .status_sequence
                .iter()
                .find(|s| !(100..=599).contains(*s))
            {
                return Err(rule_err(format!("{s} is not an HTTP status")));
            }
            let responses = rule
                .responses
                .into_iter()
                .map(|r| ScriptedResponse::from_spec(r, &format!("rule {index}")))
                .collect::<Result<_, _>>()?;
            rules.push(Rule {
                matcher,
                responses,
                status_sequence: rule.status_sequence,
                latency_ms: rule.latency_ms,
                retry_after: rule.retry_after,
            });
        }
        Ok(Self {
            rules,
            default_response: ScriptedResponse::from_spec(
                spec.default_response,
                "default_response",
            )?,
            seed: spec.seed,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let source = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&source)
    }
}
