//! Scenario files: per-image scripts for the mock backends.
//!
//! A scenario names an input image (a file or a seeded synthetic one), the
//! detections to report, and the responses each mock service returns per
//! call. Anything not scripted falls back to a neutral default.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AgentRole, ToolCall};
use crate::geometry::BBox;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse scenario {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("scenario {path} has version {found}, expected {SCENARIO_VERSION}")]
    Version { path: PathBuf, found: u32 },
    #[error("scenario image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("no scenario matches image '{0}'")]
    NoMatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub image: ImageSource,
    #[serde(default)]
    pub detections: ScriptedDetections,
    #[serde(default)]
    pub vision: VisionScript,
    #[serde(default)]
    pub agent: Vec<AgentOverride>,
    #[serde(default)]
    pub segment: Vec<SegmentReply>,
    #[serde(default)]
    pub inpaint: Vec<InpaintReply>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<Expectations>,
    /// Directory the scenario was loaded from; relative image paths resolve
    /// against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageSource {
    Synthetic { width: u32, height: u32, seed: u64 },
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedDetections {
    #[serde(default)]
    pub persons: Vec<ScriptedPerson>,
    #[serde(default)]
    pub plates: Vec<ScriptedBox>,
    #[serde(default)]
    pub signs: Vec<ScriptedBox>,
    /// Makes the detector fail on its first call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedPerson {
    pub bbox: BBox,
    pub confidence: f64,
    /// Instance mask in image coordinates; defaults to the bbox rectangle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskShape {
    Rect(BBox),
    Rects(Vec<BBox>),
}

impl MaskShape {
    pub fn rects(&self) -> Vec<BBox> {
        match self {
            MaskShape::Rect(b) => vec![*b],
            MaskShape::Rects(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedBox {
    pub bbox: BBox,
    pub confidence: f64,
    #[serde(default)]
    pub class_id: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum VisionReply {
    /// Returned verbatim.
    Text(String),
    /// Shorthand for `{"instances": [...]}`.
    Instances(Vec<ReplyInstance>),
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplyInstance {
    pub description: String,
    pub bbox: BBox,
}

impl VisionReply {
    /// The raw model text, or the scripted error message.
    pub fn render(&self) -> Result<String, String> {
        match self {
            VisionReply::Text(t) => Ok(t.clone()),
            VisionReply::Instances(list) => Ok(serde_json::json!({ "instances": list }).to_string()),
            VisionReply::Error(e) => Err(e.clone()),
        }
    }
}

/// Replies by call index; once exhausted, `then` (or the service default)
/// answers every further call. Written either as a plain list or as
/// `{replies: [...], then: ...}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "ReplyScriptRepr")]
pub struct ReplyScript {
    pub replies: Vec<VisionReply>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub then: Option<VisionReply>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ReplyScriptRepr {
    List(Vec<VisionReply>),
    Full {
        #[serde(default)]
        replies: Vec<VisionReply>,
        #[serde(default)]
        then: Option<VisionReply>,
    },
}

impl From<ReplyScriptRepr> for ReplyScript {
    fn from(r: ReplyScriptRepr) -> Self {
        match r {
            ReplyScriptRepr::List(replies) => Self { replies, then: None },
            ReplyScriptRepr::Full { replies, then } => Self { replies, then },
        }
    }
}

impl ReplyScript {
    pub fn reply(&self, index: usize) -> Option<&VisionReply> {
        self.replies.get(index).or(self.then.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionScript {
    #[serde(default)]
    pub describe: ReplyScript,
    #[serde(default)]
    pub classify: ReplyScript,
    #[serde(default)]
    pub audit: ReplyScript,
}

/// Replaces parts of the engine-suggested turn for one agent call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentOverride {
    pub role: AgentRole,
    /// 1-based index among this role's calls.
    pub call: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    /// Drop the tool call and answer with text only.
    #[serde(default)]
    pub no_tool: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SegmentReply {
    /// Rectangle in crop coordinates.
    Rect(BBox),
    Rects(Vec<BBox>),
    /// The whole crop.
    Full,
    /// Explicit "nothing found".
    Fail(String),
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InpaintReply {
    Fill([u8; 3]),
    Error(String),
}

/// Golden values a replay of this scenario must reproduce.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    #[serde(default)]
    pub coverage_percent: Option<f64>,
    #[serde(default)]
    pub pii_pixels: Option<u64>,
    #[serde(default)]
    pub iterations: Option<u32>,
    #[serde(default)]
    pub audit_attempts: Option<u32>,
    #[serde(default)]
    pub human_review: Option<bool>,
    #[serde(default)]
    pub inpaint_calls: Option<u64>,
    #[serde(default)]
    pub person_masks: Option<usize>,
    #[serde(default)]
    pub sign_masks: Option<usize>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.into(), source })?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let parsed =
            if is_json { serde_json::from_str(&text).map_err(|e| e.to_string()) } else { Self::from_yaml(&text) };
        let mut s = parsed.map_err(|message| ScenarioError::Parse { path: path.into(), message })?;
        if s.version != SCENARIO_VERSION {
            return Err(ScenarioError::Version { path: path.into(), found: s.version });
        }
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    /// Parses YAML with the same enum encoding as JSON (`{rect: [...]}`,
    /// `full`), rather than YAML tags.
    pub fn from_yaml(text: &str) -> Result<Self, String> {
        let value: serde_json::Value = serde_yaml::from_str(text).map_err(|e| e.to_string())?;
        serde_json::from_value(value).map_err(|e| e.to_string())
    }

    /// Every `*.yaml`, `*.yml` and `*.json` scenario in `dir`, sorted by path.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>, ScenarioError> {
        let entries = std::fs::read_dir(dir).map_err(|source| ScenarioError::Io { path: dir.into(), source })?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension().and_then(|e| e.to_str()).is_some_and(|e| matches!(e, "yaml" | "yml" | "json"))
            })
            .collect();
        paths.sort();
        paths.iter().map(|p| Self::load(p)).collect()
    }

    pub fn image_path(&self) -> Option<PathBuf> {
        match &self.image {
            ImageSource::Path(p) if p.is_absolute() => Some(p.clone()),
            ImageSource::Path(p) => Some(self.base_dir.join(p)),
            ImageSource::Synthetic { .. } => None,
        }
    }

    /// Name used for the output directory.
    pub fn stem(&self) -> String {
        self.name.clone()
    }

    pub fn load_image(&self) -> Result<RgbImage, ScenarioError> {
        match &self.image {
            ImageSource::Synthetic { width, height, seed } => {
                if *width == 0 || *height == 0 {
                    return Err(ScenarioError::Image {
                        path: self.base_dir.clone(),
                        message: "zero-sized image".into(),
                    });
                }
                Ok(synthetic_image(*width, *height, *seed))
            }
            ImageSource::Path(_) => {
                let path = self.image_path().expect("path source");
                image::open(&path)
                    .map(|i| i.to_rgb8())
                    .map_err(|e| ScenarioError::Image { path, message: e.to_string() })
            }
        }
    }
}

/// Seeded smooth gradient plus noise, so blur and inpainting leave visible,
/// checkable changes.
pub fn synthetic_image(width: u32, height: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: [u32; 3] = [rng.gen_range(0..256), rng.gen_range(0..256), rng.gen_range(0..256)];
    RgbImage::from_fn(width, height, |x, y| {
        let base = [x * 255 / width.max(1), y * 255 / height.max(1), (x + y) * 127 / (width + height).max(1)];
        let mut px = [0u8; 3];
        for c in 0..3 {
            let noise: i32 = rng.gen_range(-24..=24);
            px[c] = (((base[c] + phase[c]) % 256) as i32 + noise).clamp(0, 255) as u8;
        }
        Rgb(px)
    })
}
