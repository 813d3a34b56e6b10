//! Interfaces to every model the engine calls, with scripted mocks and HTTP
//! clients behind the same traits.
//!
//! Backends return raw outputs; all parsing happens engine-side.

pub mod http;
pub mod mock;
pub mod scenario;

use std::fmt;
use std::io::Cursor;
use std::sync::Arc;
use std::time::Duration;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{Detection, ImageDims};
use crate::raster::BinaryMask;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Service {
    Detect,
    Vision,
    Agent,
    Segment,
    Inpaint,
}

impl fmt::Display for Service {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Service::Detect => "detect",
            Service::Vision => "vision",
            Service::Agent => "agent",
            Service::Segment => "segment",
            Service::Inpaint => "inpaint",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("{service} backend unreachable: {message}")]
    Unreachable { service: Service, message: String },
    #[error("{service} backend timed out")]
    Timeout { service: Service },
    #[error("{service} backend returned HTTP {status}: {body}")]
    Status { service: Service, status: u16, body: String },
    #[error("{service} backend sent an unusable response: {message}")]
    Protocol { service: Service, message: String },
    #[error("{service} backend failed: {message}")]
    Failed { service: Service, message: String },
    #[error("invalid {service} request: {message}")]
    InvalidRequest { service: Service, message: String },
}

impl BackendError {
    pub fn service(&self) -> Service {
        match self {
            BackendError::Unreachable { service, .. }
            | BackendError::Timeout { service }
            | BackendError::Status { service, .. }
            | BackendError::Protocol { service, .. }
            | BackendError::Failed { service, .. }
            | BackendError::InvalidRequest { service, .. } => *service,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonDetection {
    pub detection: Detection,
    pub mask: BinaryMask,
}

pub trait Detector: Send + Sync {
    fn detect_persons(&self, image: &RgbImage) -> Result<Vec<PersonDetection>, BackendError>;
    fn detect_plates(&self, image: &RgbImage) -> Result<Vec<Detection>, BackendError>;
    fn detect_signs(&self, image: &RgbImage) -> Result<Vec<Detection>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisionPurpose {
    Describe,
    Classify,
    Audit,
}

#[derive(Debug, Clone)]
pub struct VisionQuery<'a> {
    pub image: &'a RgbImage,
    pub prompt: String,
    pub purpose: VisionPurpose,
    pub timeout: Duration,
}

pub trait VisionModel: Send + Sync {
    /// Raw model text, unmodified.
    fn vision_classify(&self, query: &VisionQuery<'_>) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Auditor,
    Orchestrator,
    Generative,
    /// Rewrites person descriptions with a random palette.
    Diversifier,
}

impl AgentRole {
    pub fn name(self) -> &'static str {
        match self {
            AgentRole::Auditor => "AuditorAgent",
            AgentRole::Orchestrator => "OrchestratorAgent",
            AgentRole::Generative => "GenerativeAgent",
            AgentRole::Diversifier => "DiversifierAgent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    /// `system`, `user`, `assistant` or `tool`.
    pub role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    /// Verbatim argument payload.
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgentTurn {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
}

#[derive(Debug, Clone)]
pub struct ToolSpec {
    pub name: &'static str,
    pub description: &'static str,
    pub parameters: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct AgentRequest {
    pub role: AgentRole,
    pub system: String,
    pub history: Vec<ChatMessage>,
    pub tools: Vec<ToolSpec>,
    /// What the engine expects this turn to be. Mocks echo it unless scripted
    /// otherwise; real models ignore it.
    pub suggested: AgentTurn,
    pub timeout: Duration,
}

pub trait AgentModel: Send + Sync {
    fn agent_chat(&self, request: &AgentRequest) -> Result<AgentTurn, BackendError>;
}

#[derive(Debug, Clone)]
pub struct SegmentRequest<'a> {
    pub crop: &'a RgbImage,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentResult {
    /// Mask in crop coordinates.
    Mask(BinaryMask),
    Failed(String),
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, request: &SegmentRequest<'_>) -> Result<SegmentResult, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Openpose,
    Canny,
}

impl ControlMode {
    pub fn default_scale(self) -> f64 {
        match self {
            ControlMode::Openpose => 0.8,
            ControlMode::Canny => 0.3,
        }
    }
}

/// Diffusion settings, passed through to the inpainting service untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintParams {
    pub resolution: u32,
    pub strength: f64,
    pub steps: u32,
    pub guidance: f64,
    pub control_mode: ControlMode,
    pub control_scale: f64,
    pub canny_low: u32,
    pub canny_high: u32,
    pub color_match_luminance: f64,
    pub color_match_chroma: f64,
}

impl InpaintParams {
    pub fn for_mode(mode: ControlMode) -> Self {
        Self {
            resolution: 768,
            strength: 0.9,
            steps: 25,
            guidance: 9.0,
            control_mode: mode,
            control_scale: mode.default_scale(),
            canny_low: 10,
            canny_high: 30,
            color_match_luminance: 0.0,
            color_match_chroma: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InpaintRequest<'a> {
    pub image: &'a RgbImage,
    pub mask: &'a BinaryMask,
    pub positive_prompt: String,
    pub negative_prompt: String,
    pub params: InpaintParams,
}

impl InpaintRequest<'_> {
    pub fn validate(&self) -> Result<(), BackendError> {
        let invalid = |message: String| BackendError::InvalidRequest { service: Service::Inpaint, message };
        let dims = image_dims(self.image).map_err(|e| invalid(e.to_string()))?;
        if dims != self.mask.dims() {
            return Err(invalid(format!("mask {} does not match image {dims}", self.mask.dims())));
        }
        if self.mask.is_empty() {
            return Err(invalid("mask is empty".into()));
        }
        Ok(())
    }
}

pub trait Inpainter: Send + Sync {
    /// Full-size result image.
    fn inpaint(&self, request: &InpaintRequest<'_>) -> Result<RgbImage, BackendError>;
}

/// One set of model services, used by a single image job or shared.
#[derive(Clone)]
pub struct Backends {
    pub detector: Arc<dyn Detector>,
    pub vision: Arc<dyn VisionModel>,
    pub agent: Arc<dyn AgentModel>,
    pub segmenter: Arc<dyn Segmenter>,
    pub inpainter: Arc<dyn Inpainter>,
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Backends")
    }
}

pub fn image_dims(image: &RgbImage) -> Result<ImageDims, crate::geometry::GeometryError> {
    ImageDims::new(image.width(), image.height())
}

pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    image.write_to(&mut buf, ImageFormat::Png).expect("PNG encoding into memory cannot fail");
    buf.into_inner()
}

pub fn encode_mask_png(mask: &BinaryMask) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    mask.to_gray_image().write_to(&mut buf, ImageFormat::Png).expect("PNG encoding into memory cannot fail");
    buf.into_inner()
}

/// SHA-256 over raw pixels followed by any text parts, hex encoded.
pub fn digest(image: Option<&RgbImage>, texts: &[&str]) -> String {
    let mut h = Sha256::new();
    if let Some(img) = image {
        h.update(img.width().to_le_bytes());
        h.update(img.height().to_le_bytes());
        h.update(img.as_raw());
    }
    for t in texts {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    format!("{:x}", h.finalize())
}
