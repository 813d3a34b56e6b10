use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backends::{AgentRole, ChatMessage, ToolCall};
use crate::trail::now_ts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Auditor,
    Orchestrator,
    Generative,
    ToolExecutor,
}

impl Speaker {
    pub const AGENTS: [Speaker; 3] = [Speaker::Auditor, Speaker::Orchestrator, Speaker::Generative];

    pub fn name(self) -> &'static str {
        match self {
            Speaker::ToolExecutor => "ToolExecutor",
            other => other.role().expect("agent").name(),
        }
    }

    pub fn role(self) -> Option<AgentRole> {
        match self {
            Speaker::Auditor => Some(AgentRole::Auditor),
            Speaker::Orchestrator => Some(AgentRole::Orchestrator),
            Speaker::Generative => Some(AgentRole::Generative),
            Speaker::ToolExecutor => None,
        }
    }

    /// Next agent in the fixed rotation. The tool executor hands over to the
    /// auditor by default.
    pub fn successor(self) -> Speaker {
        match self {
            Speaker::Auditor => Speaker::Orchestrator,
            Speaker::Orchestrator => Speaker::Generative,
            Speaker::Generative | Speaker::ToolExecutor => Speaker::Auditor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Text,
    ToolCall,
    ToolResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub seq: u64,
    pub speaker: Speaker,
    pub kind: MessageKind,
    /// Text for text and tool-call messages (narration may be empty), JSON
    /// for tool results.
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool: Option<ToolCall>,
    /// For tool results: the seq of the answered tool call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_to: Option<u64>,
    /// Hands the floor to a specific agent, overriding the rotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addressee: Option<Speaker>,
    pub ts: String,
}

impl Message {
    pub fn is_empty_text(&self) -> bool {
        self.kind == MessageKind::Text && self.payload.trim().is_empty()
    }

    /// Parsed payload of a tool result.
    pub fn result_value(&self) -> Option<Value> {
        (self.kind == MessageKind::ToolResult).then(|| serde_json::from_str(&self.payload).ok()).flatten()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConversationError {
    #[error("tool result refers to message {0}, which does not exist")]
    MissingCall(u64),
    #[error("message {0} is not a tool call")]
    NotAToolCall(u64),
    #[error("tool call {0} already has a result")]
    AlreadyAnswered(u64),
}

/// Append-only message log of one image's agent session.
#[derive(Debug, Clone, Default, PartialEq)]
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

    pub fn last(&self) -> Option<&Message> {
        self.messages.last()
    }

    pub fn get(&self, seq: u64) -> Option<&Message> {
        // seq starts at 1 and increases by one per message
        self.messages.get(seq.checked_sub(1)? as usize)
    }

    fn push(&mut self, mut m: Message) -> u64 {
        m.seq = self.messages.len() as u64 + 1;
        m.ts = now_ts();
        let seq = m.seq;
        self.messages.push(m);
        seq
    }

    pub fn push_text(&mut self, speaker: Speaker, text: impl Into<String>, addressee: Option<Speaker>) -> u64 {
        self.push(Message {
            seq: 0,
            speaker,
            kind: MessageKind::Text,
            payload: text.into(),
            tool: None,
            reply_to: None,
            addressee,
            ts: String::new(),
        })
    }

    pub fn push_tool_call(&mut self, speaker: Speaker, text: impl Into<String>, call: ToolCall) -> u64 {
        self.push(Message {
            seq: 0,
            speaker,
            kind: MessageKind::ToolCall,
            payload: text.into(),
            tool: Some(call),
            reply_to: None,
            addressee: None,
            ts: String::new(),
        })
    }

    pub fn push_tool_result(
        &mut self,
        call_seq: u64,
        result: &Value,
        addressee: Option<Speaker>,
    ) -> Result<u64, ConversationError> {
        let call = self.get(call_seq).ok_or(ConversationError::MissingCall(call_seq))?;
        if call.kind != MessageKind::ToolCall {
            return Err(ConversationError::NotAToolCall(call_seq));
        }
        if self.messages.iter().any(|m| m.reply_to == Some(call_seq)) {
            return Err(ConversationError::AlreadyAnswered(call_seq));
        }
        let tool = call.tool.clone();
        Ok(self.push(Message {
            seq: 0,
            speaker: Speaker::ToolExecutor,
            kind: MessageKind::ToolResult,
            payload: result.to_string(),
            tool,
            reply_to: Some(call_seq),
            addressee,
            ts: String::new(),
        }))
    }

    /// Speaker of the tool call a result answers.
    pub fn caller_of(&self, result: &Message) -> Option<Speaker> {
        Some(self.get(result.reply_to?)?.speaker)
    }

    /// Results of executed (not rejected) calls to `tool`, oldest first.
    pub fn executed_results<'a>(&'a self, tool: &'a str) -> impl Iterator<Item = (&'a Message, Value)> + 'a {
        self.messages.iter().filter_map(move |m| {
            let v = m.result_value()?;
            let named = m.tool.as_ref().is_some_and(|t| t.name == tool);
            (named && v.get("executed") == Some(&Value::Bool(true))).then_some((m, v))
        })
    }

    pub fn latest_text_of(&self, speaker: Speaker) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.speaker == speaker && m.kind != MessageKind::ToolResult)
            .map(|m| m.payload.as_str())
    }

    /// Chat history as seen by `viewer`: its own turns are `assistant`,
    /// everything else is `user` tagged with the speaker name.
    pub fn chat_history(&self, viewer: Speaker) -> Vec<ChatMessage> {
        self.messages
            .iter()
            .map(|m| {
                let own = m.speaker == viewer && m.kind != MessageKind::ToolResult;
                let content = match (m.kind, &m.tool) {
                    (MessageKind::ToolCall, Some(t)) => {
                        let lead = if m.payload.is_empty() { String::new() } else { format!("{}\n", m.payload) };
                        format!("{lead}[call {}({})]", t.name, t.arguments)
                    }
                    (MessageKind::ToolResult, Some(t)) => {
                        format!("[result of {}] {}", t.name, m.payload)
                    }
                    _ => m.payload.clone(),
                };
                ChatMessage {
                    role: if own { "assistant" } else { "user" }.into(),
                    name: Some(m.speaker.name().to_string()),
                    content,
                }
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(&serde_json::to_string(m).expect("message serializes"));
            out.push('\n');
        }
        out
    }
}
