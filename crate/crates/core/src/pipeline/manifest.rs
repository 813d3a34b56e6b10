use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::phase1::PersonRecord;
use crate::geometry::BBox;
use crate::llm_io::PiiInstance;
use crate::raster::{MaskRegistry, Rle};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub width: u32,
    pub height: u32,
    /// Person, plate and indirect-PII pixels; signs are excluded.
    pub pii_pixels: u64,
    pub coverage_percent: f64,
    pub category_pixels: BTreeMap<String, u64>,
    /// Generative passes, the first one included.
    pub iterations: u32,
    pub audit_attempts: u32,
    pub flags: Flags,
    pub instances: Vec<PiiInstance>,
    pub residuals: Vec<PiiInstance>,
    pub persons: Vec<PersonRecord>,
    pub plates: Vec<BBox>,
    pub signs: Vec<BBox>,
    pub masks: Vec<MaskRecord>,
    pub timings: Timings,
    pub backend_calls: BTreeMap<String, u64>,
    /// Conversation messages after the kickoff.
    pub turns: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub human_review: bool,
    pub aborted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    pub backend_failure: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine_fault: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    /// Relative to the image's output directory.
    pub file: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<String>,
    pub bbox: BBox,
    pub pixels: u64,
    pub rle: Rle,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub phase1_ms: f64,
    pub phase2_ms: f64,
    /// Time inside agent and vision-language calls.
    pub agent_ms: f64,
    pub total_ms: f64,
}

impl Manifest {
    pub fn empty(image: &str, width: u32, height: u32) -> Self {
        Self {
            schema_version: MANIFEST_VERSION,
            image: image.to_string(),
            source: None,
            width,
            height,
            pii_pixels: 0,
            coverage_percent: 0.0,
            category_pixels: BTreeMap::new(),
            iterations: 0,
            audit_attempts: 0,
            flags: Flags::default(),
            instances: Vec::new(),
            residuals: Vec::new(),
            persons: Vec::new(),
            plates: Vec::new(),
            signs: Vec::new(),
            masks: Vec::new(),
            timings: Timings::default(),
            backend_calls: BTreeMap::new(),
            turns: 0,
        }
    }

    /// Fills pixel statistics and mask records from a registry. Mask files are
    /// named `masks/NN_category[_id].png` in registration order.
    pub fn set_masks(&mut self, registry: &MaskRegistry) {
        self.pii_pixels = registry.pii_pixels();
        self.coverage_percent = registry.coverage() * 100.0;
        self.category_pixels = registry.category_pixels().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        self.masks = registry
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| MaskRecord {
                file: mask_file_name(i, e.label.as_str(), e.instance_id.as_deref()),
                category: e.label.to_string(),
                instance_id: e.instance_id.clone(),
                bbox: e.source_bbox,
                pixels: e.mask.pixel_count(),
                rle: e.mask.to_rle(),
            })
            .collect();
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn mask_file_name(index: usize, category: &str, instance_id: Option<&str>) -> String {
    match instance_id {
        Some(id) => format!("masks/{:02}_{category}_{id}.png", index + 1),
        None => format!("masks/{:02}_{category}.png", index + 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageDims;
    use crate::raster::{BinaryMask, MaskCategory, MaskEntry};

    #[test]
    fn masks_and_stats_follow_registry() {
        let dims = ImageDims::new(10, 10).unwrap();
        let mut reg = MaskRegistry::new(dims);
        let b = BBox::new(0, 0, 5, 2).unwrap();
        reg.register(MaskEntry {
            label: MaskCategory::LicensePlate,
            mask: BinaryMask::from_bbox(&b, dims),
            source_bbox: b,
            instance_id: Some("plate-001".into()),
        })
        .unwrap();
        let s = BBox::new(0, 5, 10, 5).unwrap();
        reg.register(MaskEntry {
            label: MaskCategory::TrafficSign,
            mask: BinaryMask::from_bbox(&s, dims),
            source_bbox: s,
            instance_id: None,
        })
        .unwrap();
        let mut m = Manifest::empty("x", 10, 10);
        m.set_masks(&reg);
        assert_eq!(m.pii_pixels, 10);
        assert!((m.coverage_percent - 10.0).abs() < 1e-12);
        assert_eq!(m.masks[0].file, "masks/01_license_plate_plate-001.png");
        assert_eq!(m.masks[1].file, "masks/02_traffic_sign.png");
        assert_eq!(m.category_pixels["traffic_sign"], 50);
        let back: Manifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }
}
