//! Phase 2: three agents in a fixed-rotation group chat, with every tool call
//! executed and checked by the engine.
//!
//! Agent models only supply narration and tool-call turns. Which tool runs
//! next, with which arguments, is decided here from verified workflow state,
//! so a scripted agent model is enough to drive the whole loop.

pub mod conversation;
mod engine;
pub mod orchestrator;
pub mod speaker;
pub mod state;
pub mod tools;

use std::time::Duration;

use image::RgbImage;
use thiserror::Error;

pub use conversation::{Conversation, Message, MessageKind, Speaker};
pub use engine::{run_phase2, turn_budget};
pub use orchestrator::{check_termination, orchestrator_step, Directive, COMPLETION_SIGNAL};
pub use speaker::next_speaker;
pub use state::{Limits, WorkflowState};
pub use tools::{ProcessedEntry, ProcessedRegistry, ToolContext};

use crate::backends::{BackendError, ControlMode, InpaintParams, DEFAULT_TIMEOUT};
use crate::llm_io::{PiiInstance, PromptId};
use crate::raster::MaskRegistry;

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// IoU at or above which a candidate duplicates a processed instance.
    pub iou_threshold: f64,
    /// Share of a candidate box on protected pixels that drops it.
    pub overlap_filter: f64,
    pub n_max: u32,
    pub audit_cap: u32,
    pub max_instances: usize,
    pub dilation_iterations: u32,
    pub margin: f64,
    /// Engine-side box expansion; off unless configured.
    pub expand_bboxes: bool,
    pub expand_factor: f64,
    pub classify_prompt: PromptId,
    pub inpaint: InpaintParams,
    pub agent_timeout: Duration,
    pub vision_timeout: Duration,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            overlap_filter: 0.5,
            n_max: 3,
            audit_cap: 3,
            max_instances: 5,
            dilation_iterations: 5,
            margin: 0.2,
            expand_bboxes: false,
            expand_factor: 1.5,
            classify_prompt: PromptId::PiiClassifyCityscapes,
            inpaint: InpaintParams::for_mode(ControlMode::Canny),
            agent_timeout: DEFAULT_TIMEOUT,
            vision_timeout: DEFAULT_TIMEOUT,
        }
    }
}

impl EngineConfig {
    pub fn limits(&self) -> Limits {
        Limits { n_max: self.n_max, audit_cap: self.audit_cap }
    }
}

/// Why an image stopped before normal termination.
#[derive(Debug, Clone, PartialEq)]
pub enum Abort {
    Backend(BackendError),
    /// An agent twice failed to make a directed tool call.
    NoExecution {
        speaker: Speaker,
        tool: String,
    },
    TurnBudget {
        turns: u32,
    },
}

impl Abort {
    pub fn reason(&self) -> String {
        match self {
            Abort::Backend(e) => e.to_string(),
            Abort::NoExecution { speaker, tool } => {
                format!("{} did not call {tool} after re-instruction", speaker.name())
            }
            Abort::TurnBudget { turns } => format!("turn budget exhausted after {turns} turns"),
        }
    }

    pub fn is_backend(&self) -> bool {
        matches!(self, Abort::Backend(_))
    }
}

/// Engine contract violation: a bug, not a model or backend problem.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("engine fault: {0}")]
pub struct EngineFault(pub String);

#[derive(Debug, Clone)]
pub struct Phase2Run {
    pub image: RgbImage,
    pub registry: MaskRegistry,
    pub state: WorkflowState,
    /// Every instance handed to the generative agent, in id order.
    pub instances: Vec<PiiInstance>,
    pub processed: ProcessedRegistry,
    /// Residuals still reported by the last audit.
    pub residuals: Vec<PiiInstance>,
    pub human_review: bool,
    pub abort: Option<Abort>,
    /// Messages after the kickoff.
    pub turns: u32,
}
