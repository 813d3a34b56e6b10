use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstanceStatus {
    #[serde(rename = "pending")]
    Pending,
    #[serde(rename = "processed")]
    Processed,
    #[serde(rename = "iou_overlap_with_processed")]
    SkippedIouOverlap,
    #[serde(rename = "scout_zoom_failed_no_fallback")]
    SkippedScoutZoomFailed,
    #[serde(rename = "failed_inpaint")]
    FailedInpaint,
}

impl InstanceStatus {
    pub fn is_terminal(self) -> bool {
        self != InstanceStatus::Pending
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InstanceStatus::Pending => "pending",
            InstanceStatus::Processed => "processed",
            InstanceStatus::SkippedIouOverlap => "iou_overlap_with_processed",
            InstanceStatus::SkippedScoutZoomFailed => "scout_zoom_failed_no_fallback",
            InstanceStatus::FailedInpaint => "failed_inpaint",
        }
    }
}

impl fmt::Display for InstanceStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusTransitionError {
    pub from: InstanceStatus,
    pub to: InstanceStatus,
}

impl fmt::Display for StatusTransitionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "illegal status transition {} -> {}", self.from, self.to)
    }
}

impl std::error::Error for StatusTransitionError {}

/// One classified PII candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiInstance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<String>,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub det_prompt: Option<String>,
    pub bbox: BBox,
    #[serde(default = "pending")]
    pub status: InstanceStatus,
}

fn pending() -> InstanceStatus {
    InstanceStatus::Pending
}

impl PiiInstance {
    pub fn new(description: impl Into<String>, bbox: BBox) -> Self {
        Self {
            instance_id: None,
            description: description.into(),
            det_prompt: None,
            bbox,
            status: InstanceStatus::Pending,
        }
    }

    /// Moves a pending instance to a terminal status.
    pub fn transition(&mut self, to: InstanceStatus) -> Result<(), StatusTransitionError> {
        if self.status != InstanceStatus::Pending || to == InstanceStatus::Pending {
            return Err(StatusTransitionError { from: self.status, to });
        }
        self.status = to;
        Ok(())
    }

    /// The tool-argument form (no status), as sent to the generative agent.
    pub fn to_tool_value(&self) -> Value {
        let mut m = Map::new();
        if let Some(id) = &self.instance_id {
            m.insert("instance_id".into(), Value::String(id.clone()));
        }
        if let Some(p) = &self.det_prompt {
            m.insert("det_prompt".into(), Value::String(p.clone()));
        }
        m.insert("description".into(), Value::String(self.description.clone()));
        m.insert("bbox".into(), serde_json::to_value(self.bbox).expect("bbox serializes"));
        Value::Object(m)
    }

    /// Builds an instance from one decoded entry.
    ///
    /// With `require_description`, entries lacking a non-empty `description`
    /// are rejected; otherwise `det_prompt` stands in for it.
    pub(crate) fn from_entry(v: &Value, require_description: bool) -> Result<Self, String> {
        let Value::Object(m) = v else {
            return Err(format!("expected an object, got {}", kind(v)));
        };
        let text =
            |key: &str| m.get(key).and_then(Value::as_str).map(str::trim).filter(|s| !s.is_empty()).map(str::to_string);
        let det_prompt = text("det_prompt");
        let description = match (text("description"), &det_prompt) {
            (Some(d), _) => d,
            (None, Some(p)) if !require_description => p.clone(),
            _ => return Err("missing description".into()),
        };
        let bbox = m.get("bbox").ok_or("missing bbox").and_then(|b| bbox_from_value(b).map_err(|_| "bad bbox"))?;
        let instance_id = text("instance_id").or_else(|| text("id"));
        Ok(Self { instance_id, description, det_prompt, bbox, status: InstanceStatus::Pending })
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Exactly four non-negative integers (integral floats accepted).
fn bbox_from_value(v: &Value) -> Result<BBox, ()> {
    let arr = v.as_array().ok_or(())?;
    if arr.len() != 4 {
        return Err(());
    }
    let mut out = [0i64; 4];
    for (slot, n) in out.iter_mut().zip(arr) {
        *slot = match n {
            Value::Number(num) => match (num.as_i64(), num.as_f64()) {
                (Some(i), _) => i,
                (None, Some(f)) if f.fract() == 0.0 && f.abs() < 1e15 => f as i64,
                _ => return Err(()),
            },
            _ => return Err(()),
        };
        if *slot < 0 {
            return Err(());
        }
    }
    BBox::from_array(out).map_err(|_| ())
}
