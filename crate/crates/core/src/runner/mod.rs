//! Executing a schedule against an endpoint.
//!
//! Sessions run one after another. Within a session, up to `parallelism`
//! runs proceed concurrently; trials within a run are strictly sequential
//! because each request carries the conversation so far. Every record is
//! flushed to disk as soon as its trial completes.

mod output;

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::stream::{self, StreamExt, TryStreamExt};
use thiserror::Error;
use tokio::time::Instant;

pub use output::{
    header, read_results, read_results_from, write_results, OutputError, OutputFormat, RecordSink,
    ResultRecord, ResultWriter, RESULT_COLUMNS,
};

use crate::design::{DesignMode, RunPlan, Schedule};
use crate::protocol::{
    build_chat_request, build_text_request, extract_completions, render_body, text_prompt,
    Completion, Conversation, ConversationError, EndpointMode, GenerationParams, ParamError,
    ProtocolError, ProviderClient, Role, SendError,
};
use crate::stimuli::ContentSegment;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(
        "text completion has no conversation; multiple-trials-per-run designs need a chat endpoint"
    )]
    TextModeMultiTrial,
    #[error("invalid generation parameters: {0}")]
    InvalidParams(#[from] ParamError),
    #[error(transparent)]
    Output(#[from] OutputError),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Runs executed concurrently within a session.
    pub parallelism: usize,
    /// Minimum spacing between consecutive requests across all runs.
    pub min_request_interval: Duration,
    /// Print one line per completed trial to standard error.
    pub progress: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            parallelism: 1,
            min_request_interval: Duration::ZERO,
            progress: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunAbort {
    pub session: u32,
    pub run: u32,
    /// Trial whose request failed.
    pub trial: u32,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub records_written: usize,
    pub runs_total: usize,
    pub runs_aborted: usize,
    pub aborts: Vec<RunAbort>,
}

/// Why a trial could not complete; either way the run stops.
#[derive(Debug, Error)]
enum TrialFailure {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Send(#[from] SendError),
}

impl From<ConversationError> for TrialFailure {
    fn from(e: ConversationError) -> Self {
        TrialFailure::Protocol(e.into())
    }
}

struct Pacer {
    interval: Duration,
    last: tokio::sync::Mutex<Option<Instant>>,
}

impl Pacer {
    async fn wait(&self) {
        if self.interval.is_zero() {
            return;
        }
        let mut last = self.last.lock().await;
        if let Some(previous) = *last {
            tokio::time::sleep_until(previous + self.interval).await;
        }
        *last = Some(Instant::now());
    }
}

struct Context<'a, S> {
    client: &'a ProviderClient,
    params: GenerationParams,
    mode: EndpointMode,
    sink: Arc<Mutex<S>>,
    pacer: Pacer,
    progress: bool,
}

impl<S: RecordSink> Context<'_, S> {
    fn write(&self, record: &ResultRecord) -> Result<(), OutputError> {
        self.sink.lock().expect("sink lock poisoned").write(record)
    }

    /// Executes one run. `Ok(Some(abort))` means the run stopped early;
    /// `Err` is an output failure that stops the whole experiment.
    async fn execute_run(
        &self,
        session: u32,
        run: &RunPlan,
    ) -> Result<(usize, Option<RunAbort>), OutputError> {
        let mut conversation = Conversation::new();
        if self.mode == EndpointMode::Chat && !self.params.system_prompt.is_empty() {
            conversation
                .push(
                    Role::System,
                    vec![ContentSegment::text(self.params.system_prompt.as_str())],
                )
                .expect("empty conversation accepts a system message");
        }
        let mut written = 0;
        for (position, row) in run.trials.iter().enumerate() {
            let trial = position as u32 + 1;
            let outcome = self.execute_trial(&mut conversation, &row.prompt).await;
            let (message, raw, completions) = match outcome {
                Ok(done) => done,
                Err(failure) => {
                    let abort = RunAbort {
                        session,
                        run: run.run_index,
                        trial,
                        reason: failure.to_string(),
                    };
                    if self.progress {
                        eprintln!(
                            "session {session} run {} trial {trial}: aborted: {}",
                            run.run_index, abort.reason
                        );
                    }
                    return Ok((written, Some(abort)));
                }
            };
            for completion in &completions {
                self.write(&ResultRecord {
                    session,
                    run: run.run_index,
                    item: row.item,
                    trial,
                    condition: row.condition.clone(),
                    prompt: row.prompt.clone(),
                    response: completion.text.clone(),
                    n: completion.index + 1,
                    message: message.clone(),
                    raw_response: raw.clone(),
                    extra: row.extra.clone(),
                })?;
                written += 1;
            }
            if self.progress {
                eprintln!(
                    "session {session} run {} trial {trial}: ok ({} response{})",
                    run.run_index,
                    completions.len(),
                    if completions.len() == 1 { "" } else { "s" }
                );
            }
        }
        Ok((written, None))
    }

    /// Sends one trial and, in chat mode, extends the conversation with the
    /// first choice. Returns the `Message` field, the raw body and the
    /// completions.
    async fn execute_trial(
        &self,
        conversation: &mut Conversation,
        prompt: &str,
    ) -> Result<(String, String, Vec<Completion>), TrialFailure> {
        let segments = crate::stimuli::parse_prompt_segments(prompt)
            .map_err(|e| ProtocolError::Conversation(e.to_string()))?;
        let (body, message) = match self.mode {
            EndpointMode::Chat => {
                conversation.push(Role::User, segments)?;
                let body = build_chat_request(self.client.config(), conversation, &self.params)?;
                let message = render_body(&body["messages"]);
                (body, message)
            }
            EndpointMode::Text => {
                let preamble = text_prompt(&segments)?;
                let body = build_text_request(self.client.config(), &preamble, &self.params)?;
                (body, preamble)
            }
        };
        self.pacer.wait().await;
        let raw = self.client.send(&render_body(&body)).await?;
        let mut completions = extract_completions(&raw.body, self.mode)?;
        completions.sort_by_key(|c| c.index);
        if self.mode == EndpointMode::Chat {
            let first = &completions[0];
            conversation.push(
                Role::Assistant,
                vec![ContentSegment::text(first.text.as_str())],
            )?;
        }
        Ok((message, raw.body, completions))
    }
}

/// Runs `schedule` and hands every record to `sink`.
pub async fn run_schedule<S: RecordSink>(
    schedule: &Schedule,
    client: &ProviderClient,
    params: &GenerationParams,
    sink: Arc<Mutex<S>>,
    options: &RunOptions,
) -> Result<RunSummary, RunnerError> {
    let mode = client.config().mode;
    if mode == EndpointMode::Text && schedule.mode == DesignMode::MultipleTrialsPerRun {
        return Err(RunnerError::TextModeMultiTrial);
    }
    let params = match schedule.mode {
        DesignMode::MultipleTrialsPerRun => params.single_choice(),
        DesignMode::OneTrialPerRun => params.clone(),
    };
    params.validate(mode)?;
    if mode == EndpointMode::Text && !params.system_prompt.is_empty() {
        tracing::warn!("text completion has no system role; the system prompt is not sent");
    }

    let ctx = Context {
        client,
        params,
        mode,
        sink,
        pacer: Pacer {
            interval: options.min_request_interval,
            last: tokio::sync::Mutex::new(None),
        },
        progress: options.progress,
    };

    let mut summary = RunSummary {
        runs_total: schedule.total_runs(),
        ..RunSummary::default()
    };
    let parallelism = options.parallelism.max(1);
    for session in &schedule.sessions {
        let outcomes: Vec<(usize, Option<RunAbort>)> = stream::iter(&session.runs)
            .map(|run| ctx.execute_run(session.session_index, run))
            .buffered(parallelism)
            .try_collect()
            .await?;
        for (written, abort) in outcomes {
            summary.records_written += written;
            if let Some(abort) = abort {
                summary.runs_aborted += 1;
                summary.aborts.push(abort);
            }
        }
    }
    Ok(summary)
}

/// Runs `schedule` and saves the results to `save_path` (`.csv` or
/// `.xlsx`). `extra_columns` names the stimulus metadata carried by each
/// row.
pub async fn run_experiment(
    schedule: &Schedule,
    client: &ProviderClient,
    params: &GenerationParams,
    save_path: &Path,
    extra_columns: &[String],
    options: &RunOptions,
) -> Result<RunSummary, RunnerError> {
    let writer = Arc::new(Mutex::new(ResultWriter::create(save_path, extra_columns)?));
    let summary = run_schedule(schedule, client, params, writer.clone(), options).await?;
    let writer = Arc::try_unwrap(writer)
        .ok()
        .expect("all runs finished")
        .into_inner()
        .expect("sink lock poisoned");
    writer.finish()?;
    Ok(summary)
}
