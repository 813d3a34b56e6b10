use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::EngineConfig;
use crate::backends::http::HttpSettings;
use crate::backends::{ControlMode, InpaintParams};
use crate::llm_io::PromptId;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment variable {var}={value:?} is not valid: {message}")]
    Env { var: String, value: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Which classification prompt Phase 2 uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    /// Street scenes: indirect PII on vehicles, signage, windows.
    Cityscapes,
    /// General photos: faces, documents, handwriting and the like.
    Redactions,
}

impl Dataset {
    pub fn classify_prompt(self) -> PromptId {
        match self {
            Dataset::Cityscapes => PromptId::PiiClassifyCityscapes,
            Dataset::Redactions => PromptId::PiiClassifyRedactions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub colors: Vec<String>,
    pub brightness: Vec<String>,
}

impl Default for Palette {
    fn default() -> Self {
        let words = |s: &str| s.split_whitespace().map(str::to_string).collect();
        Self {
            colors: words(
                "gray beige navy white black brown khaki blue red green yellow pink teal burgundy olive \
                 charcoal maroon tan cream sage",
            ),
            brightness: words("light dark bright faded vibrant muted pale deep pastel bold"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub person_conf: f64,
    pub plate_conf: f64,
    pub plate_nms_iou: f64,
    pub sign_conf: f64,
    pub sign_nms_iou: f64,
    /// Dedup threshold τ; `PII_IOU_THRESHOLD` overrides it.
    pub pii_iou_threshold: f64,
    pub overlap_filter: f64,
    pub n_max: u32,
    pub audit_cap: u32,
    pub max_instances: usize,
    pub dilation_iterations: u32,
    pub blur_sigma: f64,
    pub blur_kernel: usize,
    pub margin: f64,
    pub expand_bboxes: bool,
    pub expand_factor: f64,
    pub dataset: Dataset,
    pub person_inpaint: InpaintParams,
    pub indirect_inpaint: InpaintParams,
    pub palette: Palette,
    /// Seeds the fallback palette draw for person prompts.
    pub seed: u64,
    /// Directory with prompt overrides (`<prompt id>.txt`).
    pub prompts_dir: Option<PathBuf>,
    /// Timeout for every model call, in seconds; `AGENT_TIMEOUT_S`
    /// overrides it.
    pub agent_timeout_s: f64,
    pub http: HttpSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            person_conf: 0.25,
            plate_conf: 0.05,
            plate_nms_iou: 0.5,
            sign_conf: 0.2,
            sign_nms_iou: 0.45,
            pii_iou_threshold: 0.3,
            overlap_filter: 0.5,
            n_max: 3,
            audit_cap: 3,
            max_instances: 5,
            dilation_iterations: 5,
            blur_sigma: 8.0,
            blur_kernel: 15,
            margin: 0.2,
            expand_bboxes: false,
            expand_factor: 1.5,
            dataset: Dataset::Cityscapes,
            person_inpaint: InpaintParams::for_mode(ControlMode::Openpose),
            indirect_inpaint: InpaintParams::for_mode(ControlMode::Canny),
            palette: Palette::default(),
            seed: 0,
            prompts_dir: None,
            agent_timeout_s: 300.0,
            http: HttpSettings::default(),
        }
    }
}

pub const ENV_VARS: [&str; 9] = [
    "PII_IOU_THRESHOLD",
    "AGENT_TIMEOUT_S",
    "LVLM_URL",
    "LVLM_MODEL",
    "AGENT_LLM_URL",
    "AGENT_LLM_MODEL",
    "DETECT_URL",
    "SEGMENT_URL",
    "INPAINT_URL",
];

impl PipelineConfig {
    /// Defaults, then the file (TOML unless it ends in `.json`), then the
    /// process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let parse_err = |message: String| ConfigError::Parse { path: path.into(), message };
        let mut cfg: Self = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        };
        if let Some(dir) = &cfg.prompts_dir {
            if dir.is_relative() {
                cfg.prompts_dir = Some(path.parent().unwrap_or(Path::new(".")).join(dir));
            }
        }
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let number = |var: &str, value: &str| {
            value.trim().parse::<f64>().map_err(|e| ConfigError::Env {
                var: var.into(),
                value: value.into(),
                message: e.to_string(),
            })
        };
        for var in ENV_VARS {
            let Some(value) = get(var) else { continue };
            match var {
                "PII_IOU_THRESHOLD" => self.pii_iou_threshold = number(var, &value)?,
                "AGENT_TIMEOUT_S" => self.agent_timeout_s = number(var, &value)?,
                "LVLM_URL" => self.http.vision_url = Some(value),
                "LVLM_MODEL" => self.http.vision_model = value,
                "AGENT_LLM_URL" => self.http.agent_url = Some(value),
                "AGENT_LLM_MODEL" => self.http.agent_model = value,
                "DETECT_URL" => self.http.detect_url = Some(value),
                "SEGMENT_URL" => self.http.segment_url = Some(value),
                "INPAINT_URL" => self.http.inpaint_url = Some(value),
                _ => unreachable!("listed above"),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = [
            ("person_conf", self.person_conf),
            ("plate_conf", self.plate_conf),
            ("plate_nms_iou", self.plate_nms_iou),
            ("sign_conf", self.sign_conf),
            ("sign_nms_iou", self.sign_nms_iou),
            ("pii_iou_threshold", self.pii_iou_threshold),
            ("overlap_filter", self.overlap_filter),
        ];
        for (name, v) in unit {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ConfigError::Invalid(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        let checks = [
            (self.n_max >= 1, "n_max must be at least 1"),
            (self.audit_cap >= 1, "audit_cap must be at least 1"),
            (self.max_instances >= 1, "max_instances must be at least 1"),
            (self.blur_sigma > 0.0 && self.blur_sigma.is_finite(), "blur_sigma must be positive"),
            (self.blur_kernel % 2 == 1, "blur_kernel must be odd"),
            (self.margin >= 0.0 && self.margin.is_finite(), "margin must be non-negative"),
            (self.expand_factor >= 1.0 && self.expand_factor.is_finite(), "expand_factor must be at least 1"),
            (self.agent_timeout_s > 0.0 && self.agent_timeout_s.is_finite(), "agent_timeout_s must be positive"),
            (self.palette.colors.len() >= 2, "palette needs at least two colors"),
            (!self.palette.brightness.is_empty(), "palette needs at least one brightness word"),
            (self.person_inpaint.control_mode == ControlMode::Openpose, "person_inpaint must use openpose control"),
            (self.indirect_inpaint.control_mode == ControlMode::Canny, "indirect_inpaint must use canny control"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(ConfigError::Invalid((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.agent_timeout_s)
    }

    /// Endpoint settings with the configured timeout applied.
    pub fn http_settings(&self) -> HttpSettings {
        HttpSettings { timeout: self.timeout(), ..self.http.clone() }
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            iou_threshold: self.pii_iou_threshold,
            overlap_filter: self.overlap_filter,
            n_max: self.n_max,
            audit_cap: self.audit_cap,
            max_instances: self.max_instances,
            dilation_iterations: self.dilation_iterations,
            margin: self.margin,
            expand_bboxes: self.expand_bboxes,
            expand_factor: self.expand_factor,
            classify_prompt: self.dataset.classify_prompt(),
            inpaint: self.indirect_inpaint.clone(),
            agent_timeout: self.timeout(),
            vision_timeout: self.timeout(),
        }
    }
}
