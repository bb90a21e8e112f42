mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Run behavioural experiments on language models.
#[derive(Debug, Parser)]
#[command(name = "behave", version, about)]
pub struct Cli {
    /// TOML file supplying defaults for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Increase log detail (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a stimuli file and report its design.
    Validate { stimuli: PathBuf },
    /// Count tokens per run before spending any requests.
    Precheck(PrecheckArgs),
    /// Present every stimulus to the model and save the responses.
    Run(RunArgs),
    /// Code saved responses and summarize them.
    Analyze(AnalyzeArgs),
    /// Serve a scripted OpenAI-compatible endpoint.
    MockServe(MockServeArgs),
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    /// Complete passes over the stimuli.
    #[arg(long)]
    pub sessions: Option<u32>,
    /// Shuffle trial order within each run, per session.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub random_item: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerationArgs {
    /// Instruction opening every run (chat endpoints only).
    #[arg(long)]
    pub system_prompt: Option<String>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Completions per request.
    #[arg(long)]
    pub n: Option<u32>,
    /// true, false, or a count of top candidates (text endpoints).
    #[arg(long)]
    pub logprobs: Option<String>,
    #[arg(long)]
    pub top_logprobs: Option<u8>,
    /// low, high or auto.
    #[arg(long)]
    pub img_detail: Option<String>,
    /// Additional request field as KEY=JSON; repeatable.
    #[arg(long = "extra", value_name = "KEY=JSON")]
    pub extra: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PrecheckArgs {
    pub stimuli: PathBuf,
    #[command(flatten)]
    pub design: DesignArgs,
    #[command(flatten)]
    pub generation: GenerationArgs,
    /// Model whose tokenizer to use.
    #[arg(long)]
    pub model: Option<String>,
    /// JSON file mapping model ids to vocabulary and merges files.
    #[arg(long)]
    pub tokenizer_registry: Option<PathBuf>,
    /// Fail with exit code 2 if any run may exceed this many tokens.
    #[arg(long)]
    pub context_limit: Option<usize>,
    /// Tokens added per message for role framing (4 if given bare).
    #[arg(long, num_args = 0..=1, default_missing_value = "4")]
    pub message_overhead: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub stimuli: PathBuf,
    #[arg(long)]
    pub api_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Defaults to the OPENAI_API_KEY environment variable. Use NA for none.
    #[arg(long, env = "OPENAI_API_KEY", hide_env_values = true)]
    pub api_key: Option<String>,
    /// Override the endpoint mode inferred from the URL.
    #[arg(long)]
    pub mode: Option<String>,
    /// Result file (.csv or .xlsx).
    #[arg(long)]
    pub save: Option<PathBuf>,
    #[command(flatten)]
    pub design: DesignArgs,
    #[command(flatten)]
    pub generation: GenerationArgs,
    /// Runs executed concurrently within a session.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Minimum milliseconds between requests.
    #[arg(long)]
    pub min_interval_ms: Option<u64>,
    /// Attempts per request including retries.
    #[arg(long)]
    pub max_attempts: Option<u32>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    /// Suppress per-trial progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    /// Pronoun coding of response text.
    Completions,
    /// Gender share of first-token probabilities.
    Logprobs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub results: PathBuf,
    #[arg(long, value_enum, default_value_t = AnalyzeMode::Completions)]
    pub mode: AnalyzeMode,
    /// Emit per-item differences FIRST minus SECOND instead of summaries.
    #[arg(long, value_name = "FIRST,SECOND", value_delimiter = ',')]
    pub contrast: Option<Vec<String>>,
    /// chat or text; detected from the responses when omitted.
    #[arg(long)]
    pub endpoint_mode: Option<String>,
    /// Write the table here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MockServeArgs {
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match commands::dispatch(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
