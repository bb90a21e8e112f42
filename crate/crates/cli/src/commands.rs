use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use behave_core::analysis::{
    completion_observations, item_effects, logprob_observations, record_share,
    summarize_conditions, AnalysisError, GenderTokens, Observation,
};
use behave_core::budget::{token_check, BudgetOptions};
use behave_core::protocol::ProtocolError;
use behave_core::runner::{read_results, OutputError, RunnerError};
use behave_core::tokenizer::{Tokenizer, TokenizerRegistry, DEFAULT_TOKENIZER_ID};
use behave_core::{
    build_schedule, parse_stimuli, run_experiment, EndpointConfig, EndpointMode, GenerationParams,
    ImageDetail, Logprobs, ProviderClient, ResultRecord, RetryPolicy, RunOptions, Schedule,
    StimulusSet,
};
use behave_mock::{MockServer, Scenario};
use serde_json::Value;

use crate::config::FileConfig;
use crate::{
    AnalyzeArgs, AnalyzeMode, Cli, Command, DesignArgs, GenerationArgs, MockServeArgs,
    PrecheckArgs, RunArgs,
};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_BUDGET: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_ALL_ABORTED: u8 = 4;
pub const EXIT_PARTIAL: u8 = 5;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self {
            code: EXIT_FAILURE,
            error,
        }
    }
}

fn fail(code: u8, error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code,
        error: error.into(),
    }
}

type Outcome = Result<(), Failure>;

pub async fn dispatch(cli: Cli) -> Outcome {
    let config = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Validate { stimuli } => validate(&stimuli),
        Command::Precheck(args) => precheck(args, &config),
        Command::Run(args) => run(args, &config).await,
        Command::Analyze(args) => analyze(args),
        Command::MockServe(args) => mock_serve(args).await,
    }
}

fn load_stimuli(path: &Path) -> Result<StimulusSet> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    parse_stimuli(file, &path.display().to_string())
        .with_context(|| format!("invalid stimuli {}", path.display()))
}

fn validate(path: &Path) -> Outcome {
    let set = load_stimuli(path)?;
    let schedule = build_schedule(&set, 1, false, 0).map_err(anyhow::Error::from)?;
    println!(
        "{} runs, {} rows, mode: {}",
        set.runs().len(),
        set.len(),
        schedule.mode
    );
    Ok(())
}

fn schedule_from(set: &StimulusSet, design: &DesignArgs, config: &FileConfig) -> Result<Schedule> {
    let sessions = design.sessions.or(config.sessions).unwrap_or(1);
    let random_item = design.random_item.or(config.random_item).unwrap_or(false);
    let seed = design.seed.or(config.seed).unwrap_or(0);
    Ok(build_schedule(set, sessions, random_item, seed)?)
}

fn parse_extra(pairs: &[String], config: &FileConfig) -> Result<serde_json::Map<String, Value>> {
    let mut extra = config.extra_json()?;
    for pair in pairs {
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("--extra expects KEY=JSON, got {pair:?}"))?;
        // Bare words are taken as strings.
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        extra.insert(key.to_string(), value);
    }
    Ok(extra)
}

fn params_from(args: &GenerationArgs, config: &FileConfig) -> Result<GenerationParams> {
    let defaults = GenerationParams::default();
    let logprobs = match args.logprobs.clone().or_else(|| config.logprobs_text()) {
        Some(text) => text.parse::<Logprobs>().map_err(|e| anyhow!(e))?,
        None => defaults.logprobs,
    };
    let img_detail = match args.img_detail.as_ref().or(config.img_detail.as_ref()) {
        Some(text) => text.parse::<ImageDetail>().map_err(|e| anyhow!(e))?,
        None => defaults.img_detail,
    };
    Ok(GenerationParams {
        system_prompt: args
            .system_prompt
            .clone()
            .or_else(|| config.system_prompt.clone())
            .unwrap_or_default(),
        max_tokens: args
            .max_tokens
            .or(config.max_tokens)
            .unwrap_or(defaults.max_tokens),
        temperature: args.temperature.or(config.temperature),
        n: args.n.or(config.n).unwrap_or(defaults.n),
        logprobs,
        top_logprobs: args.top_logprobs.or(config.top_logprobs),
        img_detail,
        extra: parse_extra(&args.extra, config)?,
    })
}

fn precheck(args: PrecheckArgs, config: &FileConfig) -> Outcome {
    let set = load_stimuli(&args.stimuli)?;
    let schedule = schedule_from(&set, &args.design, config)?;
    let params = params_from(&args.generation, config)?;
    let registry = match args
        .tokenizer_registry
        .as_ref()
        .or(config.tokenizer_registry.as_ref())
    {
        Some(path) => TokenizerRegistry::load(path).map_err(anyhow::Error::from)?,
        None => TokenizerRegistry::new(),
    };
    let model = args
        .model
        .clone()
        .or_else(|| config.model.clone())
        .unwrap_or_else(|| DEFAULT_TOKENIZER_ID.to_string());
    let tokenizer = registry.resolve(&model).map_err(anyhow::Error::from)?;
    if tokenizer.approximate() {
        eprintln!(
            "note: no tokenizer for {model}; counts use {} and are approximate",
            tokenizer.id()
        );
    }
    let options = BudgetOptions {
        per_message_overhead: args
            .message_overhead
            .or(config.message_overhead)
            .unwrap_or(0),
    };
    let report = token_check(&schedule, &params, &tokenizer, options);
    print!("{}", report.render());
    if let Some(limit) = args.context_limit.or(config.context_limit) {
        if report.peak() > limit {
            return Err(fail(
                EXIT_BUDGET,
                anyhow!(
                    "{} tokens may be needed, above the context limit of {limit}",
                    report.peak()
                ),
            ));
        }
    }
    Ok(())
}

fn output_failure(error: OutputError) -> Failure {
    fail(EXIT_IO, error)
}

async fn run(args: RunArgs, config: &FileConfig) -> Outcome {
    let set = load_stimuli(&args.stimuli)?;
    let schedule = schedule_from(&set, &args.design, config)?;
    let params = params_from(&args.generation, config)?;
    let api_url = args
        .api_url
        .clone()
        .or_else(|| config.api_url.clone())
        .ok_or_else(|| anyhow!("--api-url is required"))?;
    let model = args
        .model
        .clone()
        .or_else(|| config.model.clone())
        .ok_or_else(|| anyhow!("--model is required"))?;
    let mut endpoint =
        EndpointConfig::new(args.api_key.clone(), &api_url, model).map_err(anyhow::Error::from)?;
    if let Some(mode) = args.mode.as_ref().or(config.mode.as_ref()) {
        endpoint = endpoint.with_mode(mode.parse::<EndpointMode>().map_err(|e| anyhow!(e))?);
    }
    let retry = RetryPolicy {
        max_attempts: args
            .max_attempts
            .or(config.max_attempts)
            .unwrap_or(RetryPolicy::default().max_attempts),
        ..RetryPolicy::default()
    };
    let timeout = Duration::from_secs(args.timeout_secs.or(config.timeout_secs).unwrap_or(120));
    let client =
        ProviderClient::with_timeout(endpoint, retry, timeout).map_err(anyhow::Error::from)?;
    let options = RunOptions {
        parallelism: args.parallelism.or(config.parallelism).unwrap_or(1),
        min_request_interval: Duration::from_millis(
            args.min_interval_ms.or(config.min_interval_ms).unwrap_or(0),
        ),
        progress: !args.quiet,
    };
    let save = args
        .save
        .clone()
        .or_else(|| config.save_path.clone())
        .unwrap_or_else(|| "results.csv".into());

    eprintln!(
        "{} trials in {} runs over {} session(s), {}",
        schedule.total_trials(),
        schedule.total_runs(),
        schedule.sessions.len(),
        schedule.mode
    );
    let summary = match run_experiment(
        &schedule,
        &client,
        &params,
        &save,
        &set.extra_columns,
        &options,
    )
    .await
    {
        Ok(summary) => summary,
        Err(RunnerError::Output(e)) => return Err(output_failure(e)),
        Err(e) => return Err(fail(EXIT_FAILURE, e)),
    };
    eprintln!(
        "wrote {} records to {}; {} of {} runs aborted",
        summary.records_written,
        save.display(),
        summary.runs_aborted,
        summary.runs_total
    );
    for abort in &summary.aborts {
        eprintln!(
            "  session {} run {} stopped at trial {}: {}",
            abort.session, abort.run, abort.trial, abort.reason
        );
    }
    match summary.runs_aborted {
        0 => Ok(()),
        n if n == summary.runs_total => {
            Err(fail(EXIT_ALL_ABORTED, anyhow!("all {n} runs aborted")))
        }
        n => Err(fail(
            EXIT_PARTIAL,
            anyhow!("{n} of {} runs aborted", summary.runs_total),
        )),
    }
}

fn detect_mode(records: &[ResultRecord]) -> EndpointMode {
    let chat = records.iter().find_map(|r| {
        let raw: Value = serde_json::from_str(&r.raw_response).ok()?;
        let choice = raw.get("choices")?.get(0)?;
        Some(choice.get("message").is_some())
    });
    if chat == Some(false) {
        EndpointMode::Text
    } else {
        EndpointMode::Chat
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(path) => Box::new(
            File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
        ),
        None => Box::new(io::stdout().lock()),
    })
}

fn format_share(value: Option<f64>) -> String {
    value.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn analyze(args: AnalyzeArgs) -> Outcome {
    let (records, _) = read_results(&args.results).map_err(|e| fail(EXIT_FAILURE, e))?;
    let sink = open_output(args.output.as_deref())?;
    let mut out = csv::Writer::from_writer(sink);
    let tokens = GenderTokens::default();
    let endpoint_mode = match &args.endpoint_mode {
        Some(text) => text.parse::<EndpointMode>().map_err(|e| anyhow!(e))?,
        None => detect_mode(&records),
    };
    let observations = |records: &[ResultRecord]| -> Result<Vec<Observation>> {
        Ok(match args.mode {
            AnalyzeMode::Completions => completion_observations(records),
            AnalyzeMode::Logprobs => logprob_observations(records, endpoint_mode, &tokens)?,
        })
    };

    if let Some(contrast) = &args.contrast {
        let [first, second] = contrast.as_slice() else {
            return Err(anyhow!("--contrast takes exactly two conditions").into());
        };
        let effects =
            item_effects(&observations(&records)?, first, second).map_err(anyhow::Error::from)?;
        out.write_record(["Item", first.as_str(), second.as_str(), "Difference"])
            .map_err(anyhow::Error::from)?;
        for e in effects {
            out.write_record([
                e.item.to_string(),
                format!("{:.6}", e.first),
                format!("{:.6}", e.second),
                format!("{:.6}", e.difference),
            ])
            .map_err(anyhow::Error::from)?;
        }
    } else {
        match args.mode {
            AnalyzeMode::Completions => {
                out.write_record([
                    "Condition",
                    "Trials",
                    "Feminine",
                    "Masculine",
                    "Both",
                    "None",
                    "FeminineProportion",
                ])
                .map_err(anyhow::Error::from)?;
                for s in summarize_conditions(&records) {
                    out.write_record([
                        s.condition.clone(),
                        s.trials.to_string(),
                        s.feminine.to_string(),
                        s.masculine.to_string(),
                        s.both.to_string(),
                        s.none.to_string(),
                        format_share(s.feminine_proportion),
                    ])
                    .map_err(anyhow::Error::from)?;
                    if s.both > 0 {
                        eprintln!(
                            "{}: {} response(s) with both genders excluded",
                            s.condition, s.both
                        );
                    }
                }
            }
            AnalyzeMode::Logprobs => write_item_shares(&mut out, &records, endpoint_mode, &tokens)?,
        }
    }
    out.flush().context("cannot write output")?;
    Ok(())
}

#[derive(Default)]
struct ShareCell {
    sum: f64,
    records: usize,
    partial: usize,
    skipped: usize,
}

fn write_item_shares<W: Write>(
    out: &mut csv::Writer<W>,
    records: &[ResultRecord],
    mode: EndpointMode,
    tokens: &GenderTokens,
) -> Result<()> {
    let mut cells: BTreeMap<(u32, String), ShareCell> = BTreeMap::new();
    for record in records {
        let cell = cells
            .entry((record.item, record.condition.clone()))
            .or_default();
        match record_share(record, mode, tokens) {
            Ok(share) => {
                cell.sum += share.share;
                cell.records += 1;
                cell.partial += usize::from(share.partial);
            }
            Err(AnalysisError::NoGenderTokens) => cell.skipped += 1,
            Err(AnalysisError::Protocol(ProtocolError::LogprobsAbsent)) => bail!(
                "session {} run {} trial {}: response has no logprobs (LogprobsAbsent)",
                record.session,
                record.run,
                record.trial
            ),
            Err(e) => return Err(e.into()),
        }
    }
    out.write_record([
        "Item",
        "Condition",
        "Records",
        "FeminineShare",
        "Partial",
        "NoGenderToken",
    ])?;
    for ((item, condition), cell) in cells {
        let mean = (cell.records > 0).then(|| cell.sum / cell.records as f64);
        out.write_record([
            item.to_string(),
            condition,
            cell.records.to_string(),
            format_share(mean),
            cell.partial.to_string(),
            cell.skipped.to_string(),
        ])?;
    }
    Ok(())
}

async fn mock_serve(args: MockServeArgs) -> Outcome {
    let scenario = Scenario::load(&args.scenario).map_err(anyhow::Error::from)?;
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .with_context(|| format!("invalid address {}:{}", args.host, args.port))?;
    let server = MockServer::start(scenario, addr)
        .await
        .map_err(anyhow::Error::from)?;
    println!("listening on http://{}", server.addr());
    eprintln!(
        "chat: {}  text: {}  captures: {}",
        server.chat_url(),
        server.completions_url(),
        server.url(behave_mock::CAPTURES_PATH)
    );
    tokio::signal::ctrl_c()
        .await
        .context("cannot wait for interrupt")?;
    server.shutdown().await;
    Ok(())
}
