//! Behavioural experiments on large language models.
//!
//! The pipeline mirrors how a psycholinguistic study is run with human
//! participants: a stimuli table is loaded ([`stimuli`]), expanded into a
//! schedule of conversations ([`design`]), checked against a token budget
//! ([`budget`]), executed against an OpenAI-compatible endpoint
//! ([`protocol`], [`runner`]) and finally coded ([`analysis`]).

pub mod analysis;
pub mod budget;
pub mod design;
pub mod protocol;
pub mod runner;
pub mod stimuli;
pub mod tokenizer;

pub use design::{build_schedule, schedule_mode, DesignMode, RunPlan, Schedule, SessionPlan};
pub use protocol::{
    Conversation, EndpointConfig, EndpointMode, GenerationParams, ImageDetail, Logprobs, Message,
    ProviderClient, ProviderError, RetryPolicy, Role,
};
pub use runner::{run_experiment, ResultRecord, RunOptions, RunSummary};
pub use stimuli::{parse_prompt_segments, parse_stimuli, ContentSegment, StimulusRow, StimulusSet};
pub use tokenizer::{BpeTokenizer, Tokenizer, TokenizerRegistry};
