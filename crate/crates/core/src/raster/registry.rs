use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{BinaryMask, RasterError};
use crate::geometry::{BBox, ImageDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskCategory {
    Person,
    LicensePlate,
    /// Exclusion only: protected from detection and auditing, never counted
    /// as anonymized PII.
    TrafficSign,
    IndirectPii,
}

impl MaskCategory {
    pub const ALL: [MaskCategory; 4] =
        [MaskCategory::Person, MaskCategory::LicensePlate, MaskCategory::TrafficSign, MaskCategory::IndirectPii];

    pub fn is_pii(self) -> bool {
        !matches!(self, MaskCategory::TrafficSign)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskCategory::Person => "person",
            MaskCategory::LicensePlate => "license_plate",
            MaskCategory::TrafficSign => "traffic_sign",
            MaskCategory::IndirectPii => "indirect_pii",
        }
    }
}

impl fmt::Display for MaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct MaskEntry {
    pub label: MaskCategory,
    pub mask: BinaryMask,
    pub source_bbox: BBox,
    pub instance_id: Option<String>,
}

/// Every mask registered for one image, in registration order.
#[derive(Debug, Clone)]
pub struct MaskRegistry {
    dims: ImageDims,
    entries: Vec<MaskEntry>,
}

impl MaskRegistry {
    pub fn new(dims: ImageDims) -> Self {
        Self { dims, entries: Vec::new() }
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn register(&mut self, entry: MaskEntry) -> Result<(), RasterError> {
        if entry.mask.dims() != self.dims {
            return Err(RasterError::DimsMismatch { left: self.dims, right: entry.mask.dims() });
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn union_where(&self, pred: impl Fn(MaskCategory) -> bool) -> BinaryMask {
        let mut acc = BinaryMask::empty(self.dims);
        for e in self.entries.iter().filter(|e| pred(e.label)) {
            acc.union_in_place(&e.mask).expect("registry masks share dims");
        }
        acc
    }

    /// Union of anonymized PII (signs excluded).
    pub fn pii_union(&self) -> BinaryMask {
        self.union_where(MaskCategory::is_pii)
    }

    /// Union of everything already handled, signs included.
    pub fn protected_union(&self) -> BinaryMask {
        self.union_where(|_| true)
    }

    pub fn pii_pixels(&self) -> u64 {
        self.pii_union().pixel_count()
    }

    /// Fraction of the image covered by anonymized PII, in `[0, 1]`.
    pub fn coverage(&self) -> f64 {
        self.pii_union().coverage()
    }

    /// Pixels of the per-category union, for every category present.
    pub fn category_pixels(&self) -> BTreeMap<MaskCategory, u64> {
        MaskCategory::ALL
            .iter()
            .filter(|c| self.entries.iter().any(|e| e.label == **c))
            .map(|&c| (c, self.union_where(|l| l == c).pixel_count()))
            .collect()
    }

    pub fn count_of(&self, category: MaskCategory) -> usize {
        self.entries.iter().filter(|e| e.label == category).count()
    }
}
