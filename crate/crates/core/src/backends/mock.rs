//! Deterministic backends driven by a [`Scenario`].

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use image::{Rgb, RgbImage};

use super::scenario::{InpaintReply, Scenario, SegmentReply};
use super::{
    AgentModel, AgentRequest, AgentRole, AgentTurn, BackendError, Backends, Detector, InpaintRequest, Inpainter,
    PersonDetection, SegmentRequest, SegmentResult, Segmenter, Service, VisionModel, VisionPurpose, VisionQuery,
};
use crate::geometry::{BBox, Detection, ImageDims};
use crate::raster::BinaryMask;

pub const DEFAULT_DESCRIPTION: &str =
    r#"{"description": "An average-build pedestrian waiting, facing toward, in a coat and trousers"}"#;
pub const EMPTY_INSTANCES: &str = r#"{"instances": []}"#;
pub const MID_GRAY: [u8; 3] = [128, 128, 128];

/// All five mock services for one scenario.
pub fn backends(scenario: &Scenario, dims: ImageDims) -> Backends {
    let script = Arc::new(scenario.clone());
    Backends {
        detector: Arc::new(MockDetector::new(script.clone(), dims)),
        vision: Arc::new(MockVision { script: script.clone(), calls: Mutex::default() }),
        agent: Arc::new(MockAgent { script: script.clone(), calls: Mutex::default() }),
        segmenter: Arc::new(MockSegmenter { script: script.clone(), calls: Mutex::default() }),
        inpainter: Arc::new(MockInpainter { script, calls: Mutex::default() }),
    }
}

fn next(counter: &Mutex<usize>) -> usize {
    let mut c = counter.lock().expect("mock counter poisoned");
    let i = *c;
    *c += 1;
    i
}

pub struct MockDetector {
    persons: Vec<PersonDetection>,
    plates: Vec<Detection>,
    signs: Vec<Detection>,
    error: Mutex<Option<String>>,
}

impl MockDetector {
    pub fn new(script: Arc<Scenario>, dims: ImageDims) -> Self {
        let d = &script.detections;
        let persons = d
            .persons
            .iter()
            .map(|p| {
                let rects = p.mask.as_ref().map(|m| m.rects()).unwrap_or_else(|| vec![p.bbox]);
                let mut mask = BinaryMask::empty(dims);
                for r in &rects {
                    mask.union_in_place(&BinaryMask::from_bbox(r, dims)).expect("same dims");
                }
                PersonDetection { detection: Detection::new(p.bbox, p.confidence, 0), mask }
            })
            .collect();
        let boxes = |v: &[super::scenario::ScriptedBox]| {
            v.iter().map(|b| Detection::new(b.bbox, b.confidence, b.class_id)).collect()
        };
        Self { persons, plates: boxes(&d.plates), signs: boxes(&d.signs), error: Mutex::new(d.error.clone()) }
    }

    fn check_error(&self) -> Result<(), BackendError> {
        match self.error.lock().expect("mock poisoned").take() {
            Some(message) => Err(BackendError::Failed { service: Service::Detect, message }),
            None => Ok(()),
        }
    }
}

impl Detector for MockDetector {
    fn detect_persons(&self, _image: &RgbImage) -> Result<Vec<PersonDetection>, BackendError> {
        self.check_error()?;
        Ok(self.persons.clone())
    }

    fn detect_plates(&self, _image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
        self.check_error()?;
        Ok(self.plates.clone())
    }

    fn detect_signs(&self, _image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
        self.check_error()?;
        Ok(self.signs.clone())
    }
}

pub struct MockVision {
    script: Arc<Scenario>,
    calls: Mutex<HashMap<VisionPurpose, usize>>,
}

impl VisionModel for MockVision {
    fn vision_classify(&self, query: &VisionQuery<'_>) -> Result<String, BackendError> {
        let index = {
            let mut calls = self.calls.lock().expect("mock poisoned");
            let c = calls.entry(query.purpose).or_insert(0);
            *c += 1;
            *c - 1
        };
        let v = &self.script.vision;
        let (channel, default) = match query.purpose {
            VisionPurpose::Describe => (&v.describe, DEFAULT_DESCRIPTION),
            VisionPurpose::Classify => (&v.classify, EMPTY_INSTANCES),
            VisionPurpose::Audit => (&v.audit, EMPTY_INSTANCES),
        };
        match channel.reply(index) {
            Some(r) => r.render().map_err(|message| BackendError::Failed { service: Service::Vision, message }),
            None => Ok(default.to_string()),
        }
    }
}

/// Echoes the engine's suggested turn unless the scenario overrides it.
pub struct MockAgent {
    script: Arc<Scenario>,
    calls: Mutex<HashMap<AgentRole, usize>>,
}

impl AgentModel for MockAgent {
    fn agent_chat(&self, request: &AgentRequest) -> Result<AgentTurn, BackendError> {
        let call = {
            let mut calls = self.calls.lock().expect("mock poisoned");
            let c = calls.entry(request.role).or_insert(0);
            *c += 1;
            *c
        };
        let mut turn = request.suggested.clone();
        if let Some(o) = self.script.agent.iter().find(|o| o.role == request.role && o.call == call) {
            if let Some(message) = &o.error {
                return Err(BackendError::Failed { service: Service::Agent, message: message.clone() });
            }
            if let Some(t) = &o.text {
                turn.text = t.clone();
            }
            if o.tool_call.is_some() {
                turn.tool_call = o.tool_call.clone();
            }
            if o.no_tool {
                turn.tool_call = None;
            }
        }
        Ok(turn)
    }
}

pub struct MockSegmenter {
    script: Arc<Scenario>,
    calls: Mutex<usize>,
}

impl Segmenter for MockSegmenter {
    fn segment(&self, request: &SegmentRequest<'_>) -> Result<SegmentResult, BackendError> {
        let i = next(&self.calls);
        let dims = super::image_dims(request.crop)
            .map_err(|e| BackendError::InvalidRequest { service: Service::Segment, message: e.to_string() })?;
        let rects = |v: &[BBox]| {
            let mut m = BinaryMask::empty(dims);
            for r in v {
                m.union_in_place(&BinaryMask::from_bbox(r, dims)).expect("same dims");
            }
            m
        };
        Ok(match self.script.segment.get(i).unwrap_or(&SegmentReply::Full) {
            SegmentReply::Rect(b) => SegmentResult::Mask(rects(&[*b])),
            SegmentReply::Rects(v) => SegmentResult::Mask(rects(v)),
            SegmentReply::Full => SegmentResult::Mask(BinaryMask::full(dims)),
            SegmentReply::Fail(reason) => SegmentResult::Failed(reason.clone()),
            SegmentReply::Error(message) => {
                return Err(BackendError::Failed { service: Service::Segment, message: message.clone() })
            }
        })
    }
}

/// Paints the masked pixels with a flat color (mid-gray unless scripted).
pub struct MockInpainter {
    script: Arc<Scenario>,
    calls: Mutex<usize>,
}

impl Inpainter for MockInpainter {
    fn inpaint(&self, request: &InpaintRequest<'_>) -> Result<RgbImage, BackendError> {
        request.validate()?;
        let i = next(&self.calls);
        let fill = match self.script.inpaint.get(i) {
            Some(InpaintReply::Fill(c)) => *c,
            Some(InpaintReply::Error(message)) => {
                return Err(BackendError::Failed { service: Service::Inpaint, message: message.clone() })
            }
            None => MID_GRAY,
        };
        Ok(fill_mask(request.image, request.mask, fill))
    }
}

pub fn fill_mask(image: &RgbImage, mask: &BinaryMask, color: [u8; 3]) -> RgbImage {
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get(x, y) {
            *px = Rgb(color);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::scenario::{ImageSource, ReplyScript, ScriptedPerson, VisionReply};
    use crate::backends::{ControlMode, InpaintParams, DEFAULT_TIMEOUT};

    fn scenario() -> Scenario {
        Scenario {
            version: 1,
            name: "t".into(),
            description: None,
            image: ImageSource::Synthetic { width: 20, height: 10, seed: 1 },
            detections: Default::default(),
            vision: Default::default(),
            agent: vec![],
            segment: vec![],
            inpaint: vec![],
            expect: None,
            base_dir: Default::default(),
        }
    }

    #[test]
    fn classify_passthrough_and_defaults() {
        let mut s = scenario();
        let raw = "  {\"instances\":[{\"description\":\"x\",\"bbox\":[1,1,2,2]}]} trailing";
        s.vision.classify = ReplyScript { replies: vec![VisionReply::Text(raw.into())], then: None };
        let dims = ImageDims::new(20, 10).unwrap();
        let b = backends(&s, dims);
        let img = RgbImage::new(20, 10);
        let q =
            VisionQuery { image: &img, prompt: "p".into(), purpose: VisionPurpose::Classify, timeout: DEFAULT_TIMEOUT };
        assert_eq!(b.vision.vision_classify(&q).unwrap(), raw);
        assert_eq!(b.vision.vision_classify(&q).unwrap(), EMPTY_INSTANCES);
        let d = VisionQuery { purpose: VisionPurpose::Describe, ..q };
        assert_eq!(b.vision.vision_classify(&d).unwrap(), DEFAULT_DESCRIPTION);
    }

    #[test]
    fn person_masks_from_rects() {
        let mut s = scenario();
        s.detections.persons.push(ScriptedPerson { bbox: BBox::new(0, 0, 4, 4).unwrap(), confidence: 0.5, mask: None });
        let b = backends(&s, ImageDims::new(20, 10).unwrap());
        let p = b.detector.detect_persons(&RgbImage::new(20, 10)).unwrap();
        assert_eq!(p[0].mask.pixel_count(), 16);
    }

    #[test]
    fn inpaint_fills_only_mask() {
        let s = scenario();
        let dims = ImageDims::new(20, 10).unwrap();
        let b = backends(&s, dims);
        let img = RgbImage::from_pixel(20, 10, Rgb([9, 9, 9]));
        let mask = BinaryMask::from_bbox(&BBox::new(2, 2, 3, 3).unwrap(), dims);
        let req = InpaintRequest {
            image: &img,
            mask: &mask,
            positive_prompt: "x".into(),
            negative_prompt: String::new(),
            params: InpaintParams::for_mode(ControlMode::Canny),
        };
        let out = b.inpainter.inpaint(&req).unwrap();
        assert_eq!(out.pixels().filter(|p| p.0 == MID_GRAY).count(), 9);
    }
}
