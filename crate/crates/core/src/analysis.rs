//! Coding responses and computing gender shares.

use std::collections::{BTreeMap, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;
use thiserror::Error;

use crate::protocol::{
    extract_choice_logprobs, extract_logprobs, EndpointMode, ProtocolError, ProviderClient,
    SendError, TokenLogprob,
};
use crate::runner::ResultRecord;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no gendered token among the candidates")]
    NoGenderTokens,
    #[error("item {item} has no usable observations for condition {condition:?}")]
    MissingCondition { item: u32, condition: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Send(#[from] SendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Gender {
    Masculine,
    Feminine,
    None,
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GenderCode {
    pub value: Gender,
    /// Earliest pronoun in the response, as written.
    pub first_pronoun: Option<String>,
}

const FEMININE_PRONOUNS: [&str; 4] = ["she", "her", "hers", "herself"];
const MASCULINE_PRONOUNS: [&str; 4] = ["he", "him", "his", "himself"];

fn pronoun_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let words: Vec<&str> = FEMININE_PRONOUNS
            .iter()
            .chain(&MASCULINE_PRONOUNS)
            .copied()
            .collect();
        Regex::new(&format!(r"(?i)\b(?:{})\b", words.join("|"))).expect("static pattern")
    })
}

pub fn code_gender(response: &str) -> GenderCode {
    let mut feminine = false;
    let mut masculine = false;
    let mut first = None;
    for m in pronoun_pattern().find_iter(response) {
        let word = m.as_str().to_lowercase();
        if FEMININE_PRONOUNS.contains(&word.as_str()) {
            feminine = true;
        } else {
            masculine = true;
        }
        first.get_or_insert_with(|| m.as_str().to_string());
    }
    let value = match (feminine, masculine) {
        (true, true) => Gender::Both,
        (true, false) => Gender::Feminine,
        (false, true) => Gender::Masculine,
        (false, false) => Gender::None,
    };
    GenderCode {
        value,
        first_pronoun: first,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub trials: usize,
    pub feminine: usize,
    pub masculine: usize,
    /// Responses with pronouns of both sets; excluded from the proportion.
    pub both: usize,
    pub none: usize,
    /// Feminine over feminine plus masculine; `None` when both are zero.
    pub feminine_proportion: Option<f64>,
}

/// Per-condition pronoun counts, in order of first appearance.
pub fn summarize_conditions(records: &[ResultRecord]) -> Vec<ConditionSummary> {
    let mut summaries: Vec<ConditionSummary> = Vec::new();
    for record in records {
        let position = match summaries
            .iter()
            .position(|s| s.condition == record.condition)
        {
            Some(p) => p,
            None => {
                summaries.push(ConditionSummary {
                    condition: record.condition.clone(),
                    trials: 0,
                    feminine: 0,
                    masculine: 0,
                    both: 0,
                    none: 0,
                    feminine_proportion: None,
                });
                summaries.len() - 1
            }
        };
        let summary = &mut summaries[position];
        summary.trials += 1;
        match code_gender(&record.response).value {
            Gender::Feminine => summary.feminine += 1,
            Gender::Masculine => summary.masculine += 1,
            Gender::Both => summary.both += 1,
            Gender::None => summary.none += 1,
        }
    }
    for summary in &mut summaries {
        let coded = summary.feminine + summary.masculine;
        if coded > 0 {
            summary.feminine_proportion = Some(summary.feminine as f64 / coded as f64);
        }
    }
    summaries
}

/// Token sets compared by [`logprob_gender_share_with`]. Entries are
/// matched after stripping leading whitespace and lowercasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenderTokens {
    pub feminine: Vec<String>,
    pub masculine: Vec<String>,
}

impl Default for GenderTokens {
    fn default() -> Self {
        Self {
            feminine: vec!["she".into(), "her".into()],
            masculine: vec!["he".into(), "his".into()],
        }
    }
}

impl GenderTokens {
    fn all(&self) -> impl Iterator<Item = &str> {
        self.feminine
            .iter()
            .chain(&self.masculine)
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GenderShare {
    pub share: f64,
    /// One gender had no token among the candidates.
    pub partial: bool,
}

fn normalize(token: &str) -> String {
    token.trim_start().to_lowercase()
}

fn log_sum_exp(values: &[f64]) -> Option<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || max == f64::NEG_INFINITY {
        return None;
    }
    Some(max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

pub fn logprob_gender_share(candidates: &[TokenLogprob]) -> Result<GenderShare, AnalysisError> {
    logprob_gender_share_with(candidates, &GenderTokens::default())
}

/// Feminine probability mass over total gendered mass at one position.
pub fn logprob_gender_share_with(
    candidates: &[TokenLogprob],
    tokens: &GenderTokens,
) -> Result<GenderShare, AnalysisError> {
    let mut feminine = Vec::new();
    let mut masculine = Vec::new();
    for candidate in candidates {
        let token = normalize(&candidate.token);
        if tokens.feminine.iter().any(|t| normalize(t) == token) {
            feminine.push(candidate.logprob);
        } else if tokens.masculine.iter().any(|t| normalize(t) == token) {
            masculine.push(candidate.logprob);
        }
    }
    let share = match (log_sum_exp(&feminine), log_sum_exp(&masculine)) {
        (None, None) => return Err(AnalysisError::NoGenderTokens),
        (Some(_), None) => 1.0,
        (None, Some(_)) => 0.0,
        (Some(f), Some(m)) => 1.0 / (1.0 + (m - f).exp()),
    };
    Ok(GenderShare {
        share,
        partial: feminine.is_empty() || masculine.is_empty(),
    })
}

/// Share at the first output position of the choice a record holds.
pub fn record_share(
    record: &ResultRecord,
    mode: EndpointMode,
    tokens: &GenderTokens,
) -> Result<GenderShare, AnalysisError> {
    let choice = record.n.saturating_sub(1);
    let positions = extract_choice_logprobs(&record.raw_response, mode, choice)?;
    let first = positions.first().ok_or(ProtocolError::LogprobsAbsent)?;
    logprob_gender_share_with(first, tokens)
}

/// One numeric observation for an item under a condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observation {
    pub item: u32,
    pub condition: String,
    pub value: f64,
}

/// 1 for feminine and 0 for masculine responses; others are skipped.
pub fn completion_observations(records: &[ResultRecord]) -> Vec<Observation> {
    records
        .iter()
        .filter_map(|r| {
            let value = match code_gender(&r.response).value {
                Gender::Feminine => 1.0,
                Gender::Masculine => 0.0,
                Gender::Both | Gender::None => return None,
            };
            Some(Observation {
                item: r.item,
                condition: r.condition.clone(),
                value,
            })
        })
        .collect()
}

/// Feminine share per record. Records whose first position holds no
/// gendered token are skipped; missing logprob blocks are an error.
pub fn logprob_observations(
    records: &[ResultRecord],
    mode: EndpointMode,
    tokens: &GenderTokens,
) -> Result<Vec<Observation>, AnalysisError> {
    let mut out = Vec::new();
    for r in records {
        match record_share(r, mode, tokens) {
            Ok(share) => out.push(Observation {
                item: r.item,
                condition: r.condition.clone(),
                value: share.share,
            }),
            Err(AnalysisError::NoGenderTokens) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemEffect {
    pub item: u32,
    pub first: f64,
    pub second: f64,
    /// `first - second`.
    pub difference: f64,
}

/// Mean value under `first` minus mean value under `second`, per item in
/// ascending item order.
pub fn item_effects(
    observations: &[Observation],
    first: &str,
    second: &str,
) -> Result<Vec<ItemEffect>, AnalysisError> {
    let mut sums: BTreeMap<u32, [(f64, usize); 2]> = BTreeMap::new();
    for obs in observations {
        let slot = if obs.condition == first {
            0
        } else if obs.condition == second {
            1
        } else {
            continue;
        };
        let entry = &mut sums.entry(obs.item).or_default()[slot];
        entry.0 += obs.value;
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(item, [a, b])| {
            for ((_, count), condition) in [(a, first), (b, second)] {
                if count == 0 {
                    return Err(AnalysisError::MissingCondition {
                        item,
                        condition: condition.to_string(),
                    });
                }
            }
            let first = a.0 / a.1 as f64;
            let second = b.0 / b.1 as f64;
            Ok(ItemEffect {
                item,
                first,
                second,
                difference: first - second,
            })
        })
        .collect()
}

/// [`item_effects`] for a single item.
pub fn item_effect(
    observations: &[Observation],
    item: u32,
    first: &str,
    second: &str,
) -> Result<ItemEffect, AnalysisError> {
    let own: Vec<Observation> = observations
        .iter()
        .filter(|o| o.item == item)
        .cloned()
        .collect();
    item_effects(&own, first, second)?
        .pop()
        .ok_or_else(|| AnalysisError::MissingCondition {
            item,
            condition: first.to_string(),
        })
}

/// Re-sends a text-completion body until every target token has been seen
/// at the first position or `max_requests` is reached. Some self-hosted
/// servers return only the sampled token per request, so the distribution
/// has to be collected piecemeal. Returns one entry per distinct token.
pub async fn sample_first_token(
    client: &ProviderClient,
    body: &str,
    targets: &GenderTokens,
    max_requests: usize,
) -> Result<Vec<TokenLogprob>, AnalysisError> {
    let wanted: HashSet<String> = targets.all().map(normalize).collect();
    let mut seen: Vec<TokenLogprob> = Vec::new();
    let mut covered: HashSet<String> = HashSet::new();
    for _ in 0..max_requests {
        let raw = client.send(body).await?;
        let positions = extract_logprobs(&raw.body, client.config().mode)?;
        for candidate in positions.into_iter().next().unwrap_or_default() {
            if seen.iter().all(|s| s.token != candidate.token) {
                let key = normalize(&candidate.token);
                if wanted.contains(&key) {
                    covered.insert(key);
                }
                seen.push(candidate);
            }
        }
        if covered.len() == wanted.len() {
            break;
        }
    }
    Ok(seen)
}
