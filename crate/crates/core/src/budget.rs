//! Pre-execution token budgets.
//!
//! One-trial-per-run designs report the number of scheduled trials and the
//! longest single input. Multiple-trials-per-run designs report, per run,
//! the worst case for the final request: the system prompt, every prompt of
//! the run, and `max_tokens` for each of the `T` trials (the `T - 1`
//! responses resent as history plus the generation allowance of the last
//! trial).

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::design::{DesignMode, Schedule};
use crate::protocol::GenerationParams;
use crate::stimuli::{plain_text, StimulusRow};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BudgetError {
    #[error("{check} needs a {expected} schedule, got {actual}")]
    ModeMismatch {
        check: &'static str,
        expected: DesignMode,
        actual: DesignMode,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BudgetOptions {
    /// Tokens added per message for role framing. Zero counts prompt text
    /// only.
    pub per_message_overhead: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunBudget {
    pub run_index: u32,
    pub max_tokens_per_run: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ReportKind {
    OneTrial {
        item_numbers: usize,
        max_token_numbers: usize,
    },
    MultiTrial {
        per_run: Vec<RunBudget>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenReport {
    pub kind: ReportKind,
    pub tokenizer_id: String,
    pub approximate: bool,
}

impl TokenReport {
    /// Largest budget in the report.
    pub fn peak(&self) -> usize {
        match &self.kind {
            ReportKind::OneTrial {
                max_token_numbers, ..
            } => *max_token_numbers,
            ReportKind::MultiTrial { per_run } => per_run
                .iter()
                .map(|r| r.max_tokens_per_run)
                .max()
                .unwrap_or(0),
        }
    }

    /// Two-column table, e.g.
    ///
    /// ```text
    /// One-trial-per-run design
    /// CheckItem Values
    /// 1 item numbers 4000
    /// 2 max_token_numbers 137
    /// ```
    pub fn render(&self) -> String {
        let mut out = String::new();
        match &self.kind {
            ReportKind::OneTrial {
                item_numbers,
                max_token_numbers,
            } => {
                out.push_str("One-trial-per-run design\nCheckItem Values\n");
                let _ = writeln!(out, "1 item numbers {item_numbers}");
                let _ = writeln!(out, "2 max_token_numbers {max_token_numbers}");
            }
            ReportKind::MultiTrial { per_run } => {
                out.push_str("Multiple-trials-per-run design\nRun max_tokens_per_run\n");
                for run in per_run {
                    let _ = writeln!(out, "{} {}", run.run_index, run.max_tokens_per_run);
                }
            }
        }
        out
    }
}

/// Token count of a stimulus prompt's text content (markup and media
/// locators excluded).
pub fn prompt_tokens(tok: &dyn Tokenizer, row: &StimulusRow) -> usize {
    match row.segments() {
        Ok(segments) => tok.count(&plain_text(&segments)),
        Err(_) => tok.count(&row.prompt),
    }
}

fn system_tokens(tok: &dyn Tokenizer, params: &GenerationParams) -> (usize, usize) {
    if params.system_prompt.is_empty() {
        (0, 0)
    } else {
        (tok.count(&params.system_prompt), 1)
    }
}

pub fn token_check_one(
    schedule: &Schedule,
    params: &GenerationParams,
    tok: &dyn Tokenizer,
    options: BudgetOptions,
) -> Result<TokenReport, BudgetError> {
    if schedule.mode != DesignMode::OneTrialPerRun {
        return Err(BudgetError::ModeMismatch {
            check: "token_check_one",
            expected: DesignMode::OneTrialPerRun,
            actual: schedule.mode,
        });
    }
    let (system, system_messages) = system_tokens(tok, params);
    let overhead = options.per_message_overhead * (system_messages + 1);
    let max_token_numbers = schedule
        .runs()
        .flat_map(|(_, run)| &run.trials)
        .map(|row| system + prompt_tokens(tok, row) + overhead)
        .max()
        .unwrap_or(0);
    Ok(TokenReport {
        kind: ReportKind::OneTrial {
            item_numbers: schedule.total_trials(),
            max_token_numbers,
        },
        tokenizer_id: tok.id().to_string(),
        approximate: tok.approximate(),
    })
}

pub fn token_check_run(
    schedule: &Schedule,
    params: &GenerationParams,
    tok: &dyn Tokenizer,
    options: BudgetOptions,
) -> Result<TokenReport, BudgetError> {
    if schedule.mode != DesignMode::MultipleTrialsPerRun {
        return Err(BudgetError::ModeMismatch {
            check: "token_check_run",
            expected: DesignMode::MultipleTrialsPerRun,
            actual: schedule.mode,
        });
    }
    let (system, system_messages) = system_tokens(tok, params);
    let max_tokens = params.max_tokens as usize;
    // Trial order differs between sessions but the sum does not, so the
    // first session covers every run.
    let per_run = schedule
        .sessions
        .first()
        .map(|session| {
            session
                .runs
                .iter()
                .map(|run| {
                    let trials = run.trials.len();
                    let prompts: usize = run.trials.iter().map(|row| prompt_tokens(tok, row)).sum();
                    let messages = system_messages + 2 * trials - 1;
                    RunBudget {
                        run_index: run.run_index,
                        max_tokens_per_run: system
                            + prompts
                            + trials * max_tokens
                            + options.per_message_overhead * messages,
                    }
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(TokenReport {
        kind: ReportKind::MultiTrial { per_run },
        tokenizer_id: tok.id().to_string(),
        approximate: tok.approximate(),
    })
}

/// Runs the check matching the schedule's design.
pub fn token_check(
    schedule: &Schedule,
    params: &GenerationParams,
    tok: &dyn Tokenizer,
    options: BudgetOptions,
) -> TokenReport {
    let report = match schedule.mode {
        DesignMode::OneTrialPerRun => token_check_one(schedule, params, tok, options),
        DesignMode::MultipleTrialsPerRun => token_check_run(schedule, params, tok, options),
    };
    report.expect("check chosen by schedule mode")
}
