//! Prompt templates and everything that turns raw model text into typed
//! instances.

mod instance;
pub mod literal;
mod parse;
mod prompts;

use thiserror::Error;

pub use instance::{InstanceStatus, PiiInstance, StatusTransitionError};
pub use parse::{extract_instances_json, normalize_tool_instances, tool_arguments};
pub use prompts::{PromptId, PromptSet, PromptTemplate};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LlmIoError {
    #[error("no JSON object with instances found in model output")]
    Extraction { raw: String },
    #[error("cannot normalize tool arguments: {reason}")]
    Normalization { reason: String, raw: String },
    #[error("prompt error: {0}")]
    Prompt(String),
}

/// True when `msg` contains the words "pipeline complete" next to each
/// other, ignoring case, punctuation and spacing.
pub fn detect_completion_signal(msg: &str) -> bool {
    let lower = msg.to_lowercase();
    let tokens: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).collect();
    tokens.windows(2).any(|w| w == ["pipeline", "complete"]) || tokens.contains(&"pipelinecomplete")
}
