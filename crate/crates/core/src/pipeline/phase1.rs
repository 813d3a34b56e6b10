//! Deterministic first pass: redraw persons, blur plates, mask signs.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{Palette, PipelineConfig};
use crate::backends::{
    digest, AgentRequest, AgentRole, AgentTurn, BackendError, Backends, ChatMessage, InpaintRequest, PersonDetection,
    Service, VisionPurpose, VisionQuery,
};
use crate::geometry::{filter_confidence, nms, BBox, Detection, ImageDims};
use crate::llm_io::literal::{balanced_span, parse_value};
use crate::llm_io::{PromptId, PromptSet};
use crate::raster::{composite, gaussian_blur_region, BinaryMask, MaskCategory, MaskEntry, MaskRegistry};
use crate::trail::{EventStatus, Trail};

const ACTOR: &str = "phase1";
const FALLBACK_DESCRIPTION: &str = "A person";

/// Colors a generated prompt might mention that are not in the default
/// palette; used to catch off-palette output.
const EXTRA_COLORS: &[&str] = &[
    "grey",
    "orange",
    "purple",
    "violet",
    "gold",
    "golden",
    "silver",
    "turquoise",
    "lavender",
    "magenta",
    "indigo",
    "coral",
    "ivory",
    "mustard",
    "lime",
    "cyan",
    "crimson",
    "scarlet",
    "aqua",
    "mint",
    "peach",
    "plum",
    "lilac",
    "amber",
    "bronze",
    "fuchsia",
    "rose",
    "salmon",
    "azure",
];
const EXTRA_BRIGHTNESS: &[&str] = &["neon", "dull", "dim", "dusty", "washed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub index: usize,
    pub bbox: BBox,
    pub confidence: f64,
    pub mask_pixels: u64,
    pub description: String,
    /// Prompt sent to the inpainter.
    pub prompt: String,
    /// The diversifier's answer was unusable and a seeded draw replaced it.
    pub fallback_prompt: bool,
}

#[derive(Debug, Clone)]
pub struct Phase1Output {
    pub image: RgbImage,
    pub registry: MaskRegistry,
    pub persons: Vec<PersonRecord>,
    pub plates: Vec<BBox>,
    pub signs: Vec<BBox>,
}

#[derive(Debug)]
pub enum Phase1Error {
    Backend(BackendError),
    Fault(String),
}

impl From<BackendError> for Phase1Error {
    fn from(e: BackendError) -> Self {
        Phase1Error::Backend(e)
    }
}

fn fault(e: impl std::fmt::Display) -> Phase1Error {
    Phase1Error::Fault(e.to_string())
}

pub struct Phase1<'a> {
    pub cfg: &'a PipelineConfig,
    pub prompts: &'a PromptSet,
    pub backends: &'a Backends,
}

impl Phase1<'_> {
    pub fn run(&self, trail: &mut Trail, stem: &str, image: &RgbImage) -> Result<Phase1Output, Phase1Error> {
        let dims = ImageDims::new(image.width(), image.height()).map_err(fault)?;
        let mut out = Phase1Output {
            image: image.clone(),
            registry: MaskRegistry::new(dims),
            persons: Vec::new(),
            plates: Vec::new(),
            signs: Vec::new(),
        };
        self.persons(trail, stem, image, &mut out)?;
        self.plates(trail, image, &mut out)?;
        self.signs(trail, image, &mut out)?;
        trail.note(
            ACTOR,
            "done",
            None,
            json!({
                "persons": out.persons.len(),
                "plates": out.plates.len(),
                "signs": out.signs.len(),
                "pii_pixels": out.registry.pii_pixels(),
            }),
            EventStatus::Ok,
        );
        Ok(out)
    }

    fn persons(
        &self,
        trail: &mut Trail,
        stem: &str,
        original: &RgbImage,
        out: &mut Phase1Output,
    ) -> Result<(), Phase1Error> {
        let dims = out.registry.dims();
        let mut found = trail.detect_persons(self.backends, original)?;
        found.retain(|p| p.detection.confidence >= self.cfg.person_conf);
        found.sort_by(|a, b| a.detection.rank_cmp(&b.detection));
        for (index, PersonDetection { detection, mask }) in found.into_iter().enumerate() {
            let id = format!("person-{:03}", index + 1);
            if mask.dims() != dims {
                return Err(Phase1Error::Backend(BackendError::Protocol {
                    service: Service::Detect,
                    message: format!("person mask is {}, image is {dims}", mask.dims()),
                }));
            }
            let bbox = detection.bbox.clamp_to(dims);
            if mask.is_empty() || bbox.is_degenerate() {
                trail.note(ACTOR, "person_skipped", Some(&id), json!({ "bbox": detection.bbox }), EventStatus::Skipped);
                continue;
            }
            let description = self.describe(trail, original, &bbox, &id)?;
            let (prompt, fallback_prompt) = self.diversify(trail, stem, index, &description, &id)?;
            let req = InpaintRequest {
                image: &out.image,
                mask: &mask,
                positive_prompt: prompt.clone(),
                negative_prompt: String::new(),
                params: self.cfg.person_inpaint.clone(),
            };
            let painted = trail.inpaint(self.backends, &req, Some(&id))?;
            out.image = composite(&out.image, &painted, &mask).map_err(|e| {
                Phase1Error::Backend(BackendError::Protocol { service: Service::Inpaint, message: e.to_string() })
            })?;
            let mask_pixels = mask.pixel_count();
            out.registry
                .register(MaskEntry {
                    label: MaskCategory::Person,
                    mask,
                    source_bbox: bbox,
                    instance_id: Some(id.clone()),
                })
                .map_err(fault)?;
            trail.note(
                ACTOR,
                "person_anonymized",
                Some(&id),
                json!({ "bbox": bbox, "mask_px": mask_pixels, "fallback_prompt": fallback_prompt }),
                EventStatus::Ok,
            );
            out.persons.push(PersonRecord {
                index,
                bbox,
                confidence: detection.confidence,
                mask_pixels,
                description,
                prompt,
                fallback_prompt,
            });
        }
        Ok(())
    }

    fn describe(&self, trail: &mut Trail, original: &RgbImage, bbox: &BBox, id: &str) -> Result<String, Phase1Error> {
        let crop =
            image::imageops::crop_imm(original, bbox.x as u32, bbox.y as u32, bbox.width as u32, bbox.height as u32)
                .to_image();
        let prompt = self.prompts.render(PromptId::PersonDescription, &[]).map_err(fault)?;
        let q = VisionQuery { image: &crop, prompt, purpose: VisionPurpose::Describe, timeout: self.cfg.timeout() };
        let raw = trail.vision(self.backends, &q, Some(id))?;
        Ok(match parse_description(&raw) {
            Some(d) => d,
            None => {
                trail.note(ACTOR, "description_unparseable", Some(id), json!({ "raw": raw }), EventStatus::Warning);
                FALLBACK_DESCRIPTION.to_string()
            }
        })
    }

    fn diversify(
        &self,
        trail: &mut Trail,
        stem: &str,
        index: usize,
        description: &str,
        id: &str,
    ) -> Result<(String, bool), Phase1Error> {
        let palette = &self.cfg.palette;
        let fallback = seeded_prompt(description, palette, person_seed(self.cfg.seed, stem, index));
        let rendered = self
            .prompts
            .render(
                PromptId::PersonDiversify,
                &[
                    ("colors", palette.colors.join(", ")),
                    ("brightness", palette.brightness.join(", ")),
                    ("description", description.to_string()),
                ],
            )
            .map_err(fault)?;
        let req = AgentRequest {
            role: AgentRole::Diversifier,
            system: "You rewrite clothing descriptions for an image generator. Answer with JSON only.".into(),
            history: vec![ChatMessage { role: "user".into(), name: None, content: rendered }],
            tools: Vec::new(),
            suggested: AgentTurn { text: json!({ "description": fallback }).to_string(), tool_call: None },
            timeout: self.cfg.timeout(),
        };
        let turn = trail.agent(self.backends, &req)?;
        match parse_description(&turn.text) {
            Some(p) if palette_conforms(&p, palette) => Ok((p, false)),
            other => {
                trail.note(
                    ACTOR,
                    "diversify_fallback",
                    Some(id),
                    json!({ "reply": other.unwrap_or(turn.text), "prompt": fallback }),
                    EventStatus::Warning,
                );
                Ok((fallback, true))
            }
        }
    }

    fn plates(&self, trail: &mut Trail, original: &RgbImage, out: &mut Phase1Output) -> Result<(), Phase1Error> {
        let dets = trail.detect_plates(self.backends, original)?;
        let kept = nms(&filter_confidence(&dets, self.cfg.plate_conf), self.cfg.plate_nms_iou);
        for (i, Detection { bbox, .. }) in kept.iter().enumerate() {
            let id = format!("plate-{:03}", i + 1);
            let region = bbox.clamp_to(out.registry.dims());
            if region.is_degenerate() {
                trail.note(ACTOR, "plate_skipped", Some(&id), json!({ "bbox": bbox }), EventStatus::Skipped);
                continue;
            }
            out.image =
                gaussian_blur_region(&out.image, &region, self.cfg.blur_sigma, self.cfg.blur_kernel).map_err(fault)?;
            let mask = BinaryMask::from_bbox(&region, out.registry.dims());
            out.registry
                .register(MaskEntry {
                    label: MaskCategory::LicensePlate,
                    mask,
                    source_bbox: region,
                    instance_id: Some(id.clone()),
                })
                .map_err(fault)?;
            trail.note(ACTOR, "plate_blurred", Some(&id), json!({ "bbox": region }), EventStatus::Ok);
            out.plates.push(region);
        }
        Ok(())
    }

    fn signs(&self, trail: &mut Trail, original: &RgbImage, out: &mut Phase1Output) -> Result<(), Phase1Error> {
        let dets = trail.detect_signs(self.backends, original)?;
        let kept = nms(&filter_confidence(&dets, self.cfg.sign_conf), self.cfg.sign_nms_iou);
        for (i, Detection { bbox, .. }) in kept.iter().enumerate() {
            let id = format!("sign-{:03}", i + 1);
            let region = bbox.clamp_to(out.registry.dims());
            if region.is_degenerate() {
                continue;
            }
            let mask = BinaryMask::from_bbox(&region, out.registry.dims());
            out.registry
                .register(MaskEntry {
                    label: MaskCategory::TrafficSign,
                    mask,
                    source_bbox: region,
                    instance_id: Some(id.clone()),
                })
                .map_err(fault)?;
            trail.note(ACTOR, "sign_protected", Some(&id), json!({ "bbox": region }), EventStatus::Ok);
            out.signs.push(region);
        }
        Ok(())
    }
}

/// The `description` field of the first JSON-like object in `raw`, or the
/// whole reply when it is plain prose.
pub fn parse_description(raw: &str) -> Option<String> {
    let text = raw.trim();
    let from_object = |v: Value| v.get("description").and_then(Value::as_str).map(|s| s.trim().to_string());
    if let Ok(v) = serde_json::from_str::<Value>(text) {
        return from_object(v).filter(|s| !s.is_empty());
    }
    if let Some(start) = text.find('{') {
        let (s, e) = balanced_span(text, start)?;
        return parse_value(&text[s..e]).ok().and_then(from_object).filter(|s| !s.is_empty());
    }
    (!text.is_empty() && text.len() <= 400).then(|| text.to_string())
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase().split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()).map(str::to_string).collect()
}

/// Every color and brightness word in `text` comes from the palette, and at
/// least one palette color appears.
pub fn palette_conforms(text: &str, palette: &Palette) -> bool {
    let colors: Vec<String> = palette.colors.iter().map(|c| c.to_lowercase()).collect();
    let bright: Vec<String> = palette.brightness.iter().map(|c| c.to_lowercase()).collect();
    let ws = words(text);
    let foreign = ws.iter().any(|w| {
        (EXTRA_COLORS.contains(&w.as_str()) && !colors.contains(w))
            || (EXTRA_BRIGHTNESS.contains(&w.as_str()) && !bright.contains(w))
    });
    !foreign && ws.iter().any(|w| colors.contains(w))
}

fn strip_colors(text: &str, palette: &Palette) -> String {
    let lower_palette: Vec<String> =
        palette.colors.iter().chain(&palette.brightness).map(|c| c.to_lowercase()).collect();
    let kept: Vec<&str> = text
        .split_whitespace()
        .filter(|tok| {
            let w: String = tok.chars().filter(|c| c.is_alphabetic()).collect::<String>().to_lowercase();
            !(EXTRA_COLORS.contains(&w.as_str())
                || EXTRA_BRIGHTNESS.contains(&w.as_str())
                || lower_palette.contains(&w))
        })
        .collect();
    kept.join(" ").trim_end_matches(['.', ',', ' ']).to_string()
}

pub fn person_seed(seed: u64, stem: &str, index: usize) -> u64 {
    let h = digest(None, &[stem]);
    let stem_bits = u64::from_str_radix(&h[..16], 16).expect("hex digest");
    seed ^ stem_bits ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Deterministic stand-in for the diversifier: the neutral description with
/// two palette colors drawn from a seeded generator.
pub fn seeded_prompt(description: &str, palette: &Palette, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cs: Vec<&String> = palette.colors.choose_multiple(&mut rng, 2).collect();
    let b1 = palette.brightness.choose(&mut rng).expect("validated non-empty");
    let b2 = palette.brightness.choose(&mut rng).expect("validated non-empty");
    let base = strip_colors(description, palette);
    let base = if base.is_empty() { FALLBACK_DESCRIPTION.to_string() } else { base };
    format!("{base}, in {b1} {} upper clothing and {b2} {} lower clothing", cs[0], cs[1])
}
