//! The four tools the agents call, executed by the engine.

use image::RgbImage;
use serde::Serialize;
use serde_json::{json, Value};

use super::EngineConfig;
use crate::backends::{
    image_dims, AgentRole, BackendError, Backends, InpaintRequest, SegmentRequest, SegmentResult, ToolSpec,
    VisionPurpose, VisionQuery,
};
use crate::geometry::{crop_with_margin, expand_bbox, iou, BBox, ImageDims};
use crate::llm_io::{extract_instances_json, InstanceStatus, LlmIoError, PiiInstance, PromptSet};
use crate::raster::{
    black_out, composite, dilate, overlap_fraction, BinaryMask, MaskCategory, MaskEntry, MaskRegistry,
    StructuringElement,
};
use crate::trail::{EventStatus, Trail};

pub const CLASSIFY_PII: &str = "classify_pii";
pub const ANONYMIZE_AND_INPAINT: &str = "anonymize_and_inpaint";
pub const AUDIT_OUTPUT: &str = "audit_output";
pub const LOG_OUTPUT: &str = "log_output";

const AUDITOR: &str = "AuditorAgent";
const GENERATIVE: &str = "GenerativeAgent";

pub fn tool_specs(role: AgentRole) -> Vec<ToolSpec> {
    let string_param = |name: &str, desc: &str| json!({ "type": "object", "properties": { name: { "type": "string", "description": desc } }, "required": [name] });
    match role {
        AgentRole::Auditor => vec![
            ToolSpec {
                name: CLASSIFY_PII,
                description: "Find indirect PII in the image. Returns an instances array.",
                parameters: string_param("image", "image identifier"),
            },
            ToolSpec {
                name: AUDIT_OUTPUT,
                description: "Check the anonymized image for residual PII. Returns ok and a residual array.",
                parameters: string_param("output", "image identifier"),
            },
            ToolSpec {
                name: LOG_OUTPUT,
                description: "Record the final result for this image.",
                parameters: json!({
                    "type": "object",
                    "properties": { "image": { "type": "string" }, "output": { "type": "string" } },
                    "required": ["image"]
                }),
            },
        ],
        AgentRole::Generative => vec![ToolSpec {
            name: ANONYMIZE_AND_INPAINT,
            description: "Segment and inpaint each listed instance.",
            parameters: json!({
                "type": "object",
                "properties": {
                    "instances": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "properties": {
                                "instance_id": { "type": "string" },
                                "description": { "type": "string" },
                                "det_prompt": { "type": "string" },
                                "bbox": { "type": "array", "items": { "type": "integer" }, "minItems": 4, "maxItems": 4 }
                            },
                            "required": ["description", "bbox"]
                        }
                    }
                },
                "required": ["instances"]
            }),
        }],
        AgentRole::Orchestrator | AgentRole::Diversifier => Vec::new(),
    }
}

/// Failure of a tool run: a backend error aborts the image, a fault is an
/// engine bug.
#[derive(Debug)]
pub enum ToolError {
    Backend(BackendError),
    Fault(String),
}

impl From<BackendError> for ToolError {
    fn from(e: BackendError) -> Self {
        ToolError::Backend(e)
    }
}

fn fault(e: impl std::fmt::Display) -> ToolError {
    ToolError::Fault(e.to_string())
}

pub struct ToolContext<'a> {
    pub backends: &'a Backends,
    pub prompts: &'a PromptSet,
    pub cfg: &'a EngineConfig,
}

/// Hands out `pii-0001`, `pii-0002`, ... for one image.
#[derive(Debug, Clone, Default)]
pub struct IdAllocator {
    issued: u32,
}

impl IdAllocator {
    pub fn next_id(&mut self) -> String {
        self.issued += 1;
        format!("pii-{:04}", self.issued)
    }

    pub fn assign(&mut self, instances: &mut [PiiInstance]) {
        for i in instances {
            i.instance_id = Some(self.next_id());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcessedEntry {
    pub instance_id: String,
    pub bbox: BBox,
    pub pixels: u64,
}

/// Instances anonymized so far on this image; the IoU dedup reference.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ProcessedRegistry {
    entries: Vec<ProcessedEntry>,
}

impl ProcessedRegistry {
    pub fn entries(&self) -> &[ProcessedEntry] {
        &self.entries
    }

    pub fn push(&mut self, entry: ProcessedEntry) {
        self.entries.push(entry);
    }

    /// Highest IoU against any processed box, with that entry's id.
    pub fn best_match(&self, b: &BBox) -> Option<(f64, &str)> {
        self.entries.iter().map(|e| (iou(b, &e.bbox), e.instance_id.as_str())).max_by(|a, b| a.0.total_cmp(&b.0))
    }
}

fn classify_prompt(ctx: &ToolContext<'_>, dims: ImageDims) -> Result<String, ToolError> {
    ctx.prompts
        .render(
            ctx.cfg.classify_prompt,
            &[
                ("max_instances", ctx.cfg.max_instances.to_string()),
                ("image_width", dims.width.to_string()),
                ("image_height", dims.height.to_string()),
            ],
        )
        .map_err(fault)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyOutcome {
    pub instances: Vec<PiiInstance>,
    /// Candidates removed by the protected-area filter, with their overlap.
    pub dropped: Vec<(PiiInstance, f64)>,
    pub extraction_failed: bool,
}

/// Classifies indirect PII on the current image and drops candidates that
/// mostly lie on already-protected pixels. Survivors get fresh ids.
pub fn auditor_classify(
    ctx: &ToolContext<'_>,
    trail: &mut Trail,
    image: &RgbImage,
    registry: &MaskRegistry,
    ids: &mut IdAllocator,
) -> Result<ClassifyOutcome, ToolError> {
    let dims = image_dims(image).map_err(fault)?;
    let prompt = classify_prompt(ctx, dims)?;
    let query = VisionQuery { image, prompt, purpose: VisionPurpose::Classify, timeout: ctx.cfg.vision_timeout };
    let raw = trail.vision(ctx.backends, &query, None)?;
    let (candidates, extraction_failed) = match extract_instances_json(&raw, ctx.cfg.max_instances) {
        Ok(v) => (v, false),
        Err(LlmIoError::Extraction { .. }) => {
            trail.note(AUDITOR, "extraction_failed", None, json!({ "raw": raw }), EventStatus::Warning);
            (Vec::new(), true)
        }
        Err(e) => return Err(fault(e)),
    };

    let protected = registry.protected_union();
    let mut instances = Vec::new();
    let mut dropped = Vec::new();
    for mut c in candidates {
        c.instance_id = None;
        if ctx.cfg.expand_bboxes {
            c.bbox = expand_bbox(&c.bbox, ctx.cfg.expand_factor, dims);
        }
        let clamped = c.bbox.clamp_to(dims);
        if clamped.is_degenerate() {
            trail.note(AUDITOR, "candidate_outside_image", None, json!({ "bbox": c.bbox }), EventStatus::Skipped);
            continue;
        }
        if !registry.is_empty() {
            let overlap = overlap_fraction(&BinaryMask::from_bbox(&clamped, dims), &protected).map_err(fault)?;
            if overlap >= ctx.cfg.overlap_filter {
                trail.note(
                    AUDITOR,
                    "candidate_protected",
                    None,
                    json!({ "bbox": c.bbox, "description": c.description, "overlap": overlap }),
                    EventStatus::Skipped,
                );
                dropped.push((c, overlap));
                continue;
            }
        }
        instances.push(c);
    }
    ids.assign(&mut instances);
    Ok(ClassifyOutcome { instances, dropped, extraction_failed })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceReport {
    pub instance_id: String,
    pub status: InstanceStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixels: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Anonymizes each pending instance in order: IoU dedup, scout-and-zoom
/// segmentation, protected-area subtraction, canny inpainting, registration.
///
/// Per-instance backend failures become terminal statuses; the batch goes on.
pub fn generative_anonymize(
    ctx: &ToolContext<'_>,
    trail: &mut Trail,
    batch: &mut [PiiInstance],
    image: &RgbImage,
    registry: &mut MaskRegistry,
    processed: &mut ProcessedRegistry,
) -> Result<(RgbImage, Vec<InstanceReport>), ToolError> {
    let dims = image_dims(image).map_err(fault)?;
    let mut current = image.clone();
    let mut reports = Vec::new();
    for inst in batch.iter_mut().filter(|i| i.status == InstanceStatus::Pending) {
        let id = inst.instance_id.clone().ok_or_else(|| fault("instance without id reached the generative tool"))?;
        let (status, pixels, detail) = anonymize_one(ctx, trail, inst, &id, dims, &mut current, registry, processed)?;
        inst.transition(status).map_err(fault)?;
        let event_status = match status {
            InstanceStatus::Processed => EventStatus::Ok,
            InstanceStatus::FailedInpaint => EventStatus::Failed,
            _ => EventStatus::Skipped,
        };
        trail.note(
            GENERATIVE,
            ANONYMIZE_AND_INPAINT,
            Some(&id),
            json!({ "status": status, "pixels": pixels, "detail": detail, "bbox": inst.bbox }),
            event_status,
        );
        reports.push(InstanceReport { instance_id: id, status, pixels, detail });
    }
    Ok((current, reports))
}

#[allow(clippy::too_many_arguments)]
fn anonymize_one(
    ctx: &ToolContext<'_>,
    trail: &mut Trail,
    inst: &PiiInstance,
    id: &str,
    dims: ImageDims,
    current: &mut RgbImage,
    registry: &mut MaskRegistry,
    processed: &mut ProcessedRegistry,
) -> Result<(InstanceStatus, Option<u64>, Option<String>), ToolError> {
    if let Some((overlap, other)) = processed.best_match(&inst.bbox) {
        if overlap >= ctx.cfg.iou_threshold {
            return Ok((InstanceStatus::SkippedIouOverlap, None, Some(format!("IoU {overlap:.3} with {other}"))));
        }
    }
    let scout_failed = |why: String| Ok((InstanceStatus::SkippedScoutZoomFailed, None, Some(why)));

    let clamped = inst.bbox.clamp_to(dims);
    if clamped.is_degenerate() {
        return scout_failed("bbox lies outside the image".into());
    }
    let crop = crop_with_margin(&clamped, ctx.cfg.margin, dims);
    let crop_img =
        image::imageops::crop_imm(current, crop.x as u32, crop.y as u32, crop.width as u32, crop.height as u32)
            .to_image();
    let prompt = inst.det_prompt.clone().unwrap_or_else(|| inst.description.clone());
    let local = match trail.segment(ctx.backends, &SegmentRequest { crop: &crop_img, prompt }, id) {
        Ok(SegmentResult::Mask(m)) => m,
        Ok(SegmentResult::Failed(reason)) => return scout_failed(format!("segmentation found nothing: {reason}")),
        Err(e) => return scout_failed(format!("segmentation error: {e}")),
    };
    let full = match BinaryMask::paste_local(&local, &crop, dims) {
        Ok(m) => m,
        Err(e) => return scout_failed(format!("unusable segmentation mask: {e}")),
    };
    let mask = full.subtract(&registry.protected_union()).map_err(fault)?;
    if mask.is_empty() {
        return scout_failed("mask lies entirely on protected pixels".into());
    }

    let req = InpaintRequest {
        image: current,
        mask: &mask,
        positive_prompt: inst.description.clone(),
        negative_prompt: String::new(),
        params: ctx.cfg.inpaint.clone(),
    };
    let painted = match trail.inpaint(ctx.backends, &req, Some(id)) {
        Ok(p) => p,
        Err(e) => return Ok((InstanceStatus::FailedInpaint, None, Some(e.to_string()))),
    };
    *current = match composite(current, &painted, &mask) {
        Ok(img) => img,
        Err(e) => return Ok((InstanceStatus::FailedInpaint, None, Some(format!("unusable inpainting result: {e}")))),
    };
    let pixels = mask.pixel_count();
    registry
        .register(MaskEntry {
            label: MaskCategory::IndirectPii,
            mask,
            source_bbox: inst.bbox,
            instance_id: Some(id.to_string()),
        })
        .map_err(fault)?;
    processed.push(ProcessedEntry { instance_id: id.to_string(), bbox: inst.bbox, pixels });
    Ok((InstanceStatus::Processed, Some(pixels), None))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditOutcome {
    pub ok: bool,
    pub residuals: Vec<PiiInstance>,
    pub max_attempts_reached: bool,
    pub extraction_failed: bool,
}

/// The current image with every registered region, dilated, painted black.
pub fn audit_image(image: &RgbImage, registry: &MaskRegistry, iterations: u32) -> Result<RgbImage, ToolError> {
    let covered = dilate(&registry.protected_union(), &StructuringElement::ellipse5(iterations));
    black_out(image, &covered).map_err(fault)
}

/// Re-classifies the audit image. `attempt` is this audit's 1-based number.
pub fn auditor_audit(
    ctx: &ToolContext<'_>,
    trail: &mut Trail,
    image: &RgbImage,
    registry: &MaskRegistry,
    attempt: u32,
) -> Result<AuditOutcome, ToolError> {
    let dims = image_dims(image).map_err(fault)?;
    let masked = audit_image(image, registry, ctx.cfg.dilation_iterations)?;
    let prompt = classify_prompt(ctx, dims)?;
    let query = VisionQuery { image: &masked, prompt, purpose: VisionPurpose::Audit, timeout: ctx.cfg.vision_timeout };
    let raw = trail.vision(ctx.backends, &query, None)?;
    let max_attempts_reached = attempt >= ctx.cfg.audit_cap;
    match extract_instances_json(&raw, ctx.cfg.max_instances) {
        Ok(mut residuals) => {
            residuals.iter_mut().for_each(|r| r.instance_id = None);
            Ok(AuditOutcome { ok: residuals.is_empty(), residuals, max_attempts_reached, extraction_failed: false })
        }
        Err(LlmIoError::Extraction { .. }) => {
            trail.note(
                AUDITOR,
                "audit_unverifiable",
                None,
                json!({ "raw": raw, "attempt": attempt }),
                EventStatus::Warning,
            );
            Ok(AuditOutcome { ok: true, residuals: Vec::new(), max_attempts_reached, extraction_failed: true })
        }
        Err(e) => Err(fault(e)),
    }
}

pub fn instances_value(list: &[PiiInstance]) -> Value {
    Value::Array(list.iter().map(PiiInstance::to_tool_value).collect())
}
