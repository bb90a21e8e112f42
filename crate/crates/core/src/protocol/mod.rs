//! OpenAI-compatible chat and text completion protocol.

mod config;
mod conversation;
mod errors;
mod params;
mod request;
mod response;
mod transport;

pub use config::{EndpointConfig, EndpointMode};
pub use conversation::{Conversation, ConversationError, Message, Role};
pub use errors::{handle_error_code, ProtocolError, ProviderError};
pub use params::{GenerationParams, ImageDetail, Logprobs, ParamError};
pub use request::{
    build_chat_request, build_text_request, messages_json, render_body, text_prompt,
};
pub use response::{
    extract_choice_logprobs, extract_completions, extract_logprobs, Completion, TokenLogprob,
};
pub use transport::{ProviderClient, RawResponse, RetryPolicy, SendError};
