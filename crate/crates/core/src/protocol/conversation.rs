use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stimuli::ContentSegment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConversationError {
    #[error("a system message can only open a conversation")]
    SystemAfterStart,
    #[error("message content is empty")]
    EmptyContent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub role: Role,
    pub content: Vec<ContentSegment>,
}

impl Message {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            content: vec![ContentSegment::text(text)],
        }
    }
}

/// Ordered messages of one run. Appending returns a new conversation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Conversation {
    messages: Vec<Message>,
}

impl Conversation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn add_message(
        &self,
        role: Role,
        content: Vec<ContentSegment>,
    ) -> Result<Conversation, ConversationError> {
        let mut next = self.clone();
        next.push(role, content)?;
        Ok(next)
    }

    /// In-place variant of [`Conversation::add_message`].
    pub fn push(
        &mut self,
        role: Role,
        content: Vec<ContentSegment>,
    ) -> Result<(), ConversationError> {
        if content.is_empty() {
            return Err(ConversationError::EmptyContent);
        }
        if role == Role::System && !self.messages.is_empty() {
            return Err(ConversationError::SystemAfterStart);
        }
        self.messages.push(Message { role, content });
        Ok(())
    }

    fn turns(&self) -> &[Message] {
        match self.messages.first() {
            Some(m) if m.role == Role::System => &self.messages[1..],
            _ => &self.messages,
        }
    }

    /// `[system?] (user assistant)*`: the state between trials.
    pub fn is_settled(&self) -> bool {
        let turns = self.turns();
        turns.len() % 2 == 0 && alternates(turns)
    }

    /// `[system?] (user assistant)* user`: the shape of every request.
    pub fn is_request_ready(&self) -> bool {
        let turns = self.turns();
        turns.len() % 2 == 1 && alternates(turns)
    }
}

fn alternates(turns: &[Message]) -> bool {
    turns.iter().enumerate().all(|(i, m)| {
        let expected = if i % 2 == 0 {
            Role::User
        } else {
            Role::Assistant
        };
        m.role == expected
    })
}
