//! An OpenAI-compatible server with scripted replies, for offline tests.
//!
//! Rules are tried in order against the last user message (chat) or the
//! prompt (text completion); the first match answers. Every request is
//! recorded verbatim and can be listed from `GET /__captures`.

mod scenario;
mod server;

pub use scenario::{
    stochastic_emit, Choice, LogprobTable, Matcher, ResponseBody, Rule, Scenario, ScenarioError,
    ScriptedResponse,
};
pub use server::{Capture, MockError, MockServer, CAPTURES_PATH, CHAT_PATH, TEXT_PATH};
