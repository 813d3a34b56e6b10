//! Axis-aligned box arithmetic in `[x_min, y_min, width, height]` pixels.
//!
//! Every box inside the engine uses this convention. Backends that speak
//! corner coordinates convert at the boundary with [`BBox::from_xyxy`] and
//! [`BBox::to_xyxy`].

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Slack used when snapping real-valued edges to the integer grid, so that
/// values such as `110.00000000000001` do not round outward by a full pixel.
const SNAP_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    ZeroDims { width: u32, height: u32 },
    #[error("box has negative extent: {0}")]
    NegativeExtent(BBox),
    #[error("point ({x}, {y}) is outside {bounds}")]
    OutOfRange { x: i64, y: i64, bounds: String },
}

/// Axis-aligned box, `[x_min, y_min, width, height]`.
///
/// Serialized as a 4-element integer array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct BBox {
    pub x: i64,
    pub y: i64,
    pub width: i64,
    pub height: i64,
}

impl BBox {
    pub fn new(x: i64, y: i64, width: i64, height: i64) -> Result<Self, GeometryError> {
        let b = Self { x, y, width, height };
        if width < 0 || height < 0 {
            return Err(GeometryError::NegativeExtent(b));
        }
        Ok(b)
    }

    pub fn from_array(v: [i64; 4]) -> Result<Self, GeometryError> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [i64; 4] {
        [self.x, self.y, self.width, self.height]
    }

    /// Corner form `(x1, y1, x2, y2)` with exclusive right/bottom edges.
    pub fn from_xyxy(x1: i64, y1: i64, x2: i64, y2: i64) -> Result<Self, GeometryError> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn to_xyxy(self) -> (i64, i64, i64, i64) {
        (self.x, self.y, self.right(), self.bottom())
    }

    pub fn right(&self) -> i64 {
        self.x + self.width
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.height
    }

    pub fn area(&self) -> i64 {
        self.width.max(0) * self.height.max(0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.width <= 0 || self.height <= 0
    }

    pub fn contains_point(&self, x: i64, y: i64) -> bool {
        x >= self.x && y >= self.y && x < self.right() && y < self.bottom()
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x.max(other.x);
        let y1 = self.y.max(other.y);
        let x2 = self.right().min(other.right());
        let y2 = self.bottom().min(other.bottom());
        (x2 > x1 && y2 > y1).then(|| BBox { x: x1, y: y1, width: x2 - x1, height: y2 - y1 })
    }

    /// Intersects the box with the image rectangle. A box entirely outside
    /// the image collapses to a zero-area box on the nearest edge.
    pub fn clamp_to(&self, dims: ImageDims) -> BBox {
        let (w, h) = (dims.width as i64, dims.height as i64);
        let x1 = self.x.clamp(0, w);
        let y1 = self.y.clamp(0, h);
        let x2 = self.right().clamp(x1, w);
        let y2 = self.bottom().clamp(y1, h);
        BBox { x: x1, y: y1, width: x2 - x1, height: y2 - y1 }
    }

    pub fn is_within(&self, dims: ImageDims) -> bool {
        self.x >= 0 && self.y >= 0 && self.right() <= dims.width as i64 && self.bottom() <= dims.height as i64
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x, self.y, self.width, self.height)
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = <[i64; 4]>::deserialize(d)?;
        BBox::from_array(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::ZeroDims { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn pixel_count(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn full_box(&self) -> BBox {
        BBox { x: 0, y: 0, width: self.width as i64, height: self.height as i64 }
    }
}

impl fmt::Display for ImageDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// A detector hit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    #[serde(default)]
    pub class_id: i64,
}

impl Detection {
    pub fn new(bbox: BBox, confidence: f64, class_id: i64) -> Self {
        Self { bbox, confidence: confidence.clamp(0.0, 1.0), class_id }
    }

    /// Ordering used wherever detections are ranked: confidence descending,
    /// then `x_min` ascending, then `y_min` ascending.
    pub fn rank_cmp(&self, other: &Detection) -> Ordering {
        other
            .confidence
            .total_cmp(&self.confidence)
            .then(self.bbox.x.cmp(&other.bbox.x))
            .then(self.bbox.y.cmp(&other.bbox.y))
    }
}

/// Intersection over union. Zero when the union is empty, so degenerate
/// boxes never suppress anything.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b).map_or(0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union <= 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Snaps a real interval `[lo, hi)` outward to integer pixel edges.
fn snap_outward(lo: f64, hi: f64) -> (i64, i64) {
    ((lo + SNAP_EPS).floor() as i64, (hi - SNAP_EPS).ceil() as i64)
}

fn clamp_edges(x1: i64, y1: i64, x2: i64, y2: i64, dims: ImageDims) -> BBox {
    BBox { x: x1, y: y1, width: x2 - x1, height: y2 - y1 }.clamp_to(dims)
}

/// Scales width and height by `factor` about the box center, then clamps to
/// the image. Edges are snapped outward so the result never loses coverage.
///
/// `[500, 200, 400, 300]` at 1.5 becomes `[400, 125, 600, 450]`.
pub fn expand_bbox(b: &BBox, factor: f64, dims: ImageDims) -> BBox {
    let factor = factor.max(1.0);
    let (cx, cy) = (b.x as f64 + b.width as f64 / 2.0, b.y as f64 + b.height as f64 / 2.0);
    let (hw, hh) = (b.width as f64 * factor / 2.0, b.height as f64 * factor / 2.0);
    let (x1, x2) = snap_outward(cx - hw, cx + hw);
    let (y1, y2) = snap_outward(cy - hh, cy + hh);
    clamp_edges(x1, y1, x2, y2, dims)
}

/// Grows every side by `margin_frac` of the matching dimension (left/right by
/// a fraction of the width, top/bottom by a fraction of the height) and
/// clamps. This is the scout-and-zoom crop window.
pub fn crop_with_margin(b: &BBox, margin_frac: f64, dims: ImageDims) -> BBox {
    let m = margin_frac.max(0.0);
    let (mx, my) = (b.width as f64 * m, b.height as f64 * m);
    let (x1, x2) = snap_outward(b.x as f64 - mx, b.right() as f64 + mx);
    let (y1, y2) = snap_outward(b.y as f64 - my, b.bottom() as f64 + my);
    clamp_edges(x1, y1, x2, y2, dims)
}

/// Maps a crop-local point to full-image coordinates.
///
/// Fails when the point is outside the crop window, which means the backend
/// returned geometry it could not have seen.
pub fn map_to_full(local: (i64, i64), crop: &BBox) -> Result<(i64, i64), GeometryError> {
    let (lx, ly) = local;
    if lx < 0 || ly < 0 || lx >= crop.width || ly >= crop.height {
        return Err(GeometryError::OutOfRange { x: lx, y: ly, bounds: format!("crop {crop}") });
    }
    Ok((crop.x + lx, crop.y + ly))
}

/// Inverse of [`map_to_full`].
pub fn map_to_local(full: (i64, i64), crop: &BBox) -> Result<(i64, i64), GeometryError> {
    let (fx, fy) = full;
    if !crop.contains_point(fx, fy) {
        return Err(GeometryError::OutOfRange { x: fx, y: fy, bounds: format!("crop {crop}") });
    }
    Ok((fx - crop.x, fy - crop.y))
}

/// Maps a crop-local box to full-image coordinates. The box must fit inside
/// the crop window.
pub fn map_box_to_full(local: &BBox, crop: &BBox) -> Result<BBox, GeometryError> {
    let inside = local.x >= 0 && local.y >= 0 && local.right() <= crop.width && local.bottom() <= crop.height;
    if !inside {
        return Err(GeometryError::OutOfRange { x: local.right(), y: local.bottom(), bounds: format!("crop {crop}") });
    }
    Ok(BBox { x: local.x + crop.x, y: local.y + crop.y, ..*local })
}

/// Keeps detections at or above `min_confidence`.
pub fn filter_confidence(dets: &[Detection], min_confidence: f64) -> Vec<Detection> {
    dets.iter().copied().filter(|d| d.confidence >= min_confidence).collect()
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited in [`Detection::rank_cmp`] order; a candidate is
/// kept unless it overlaps an already kept box with IoU at or above
/// `iou_threshold`. Output is in visiting order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| a.rank_cmp(b));
    let mut kept: Vec<Detection> = Vec::with_capacity(order.len());
    for d in order {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < iou_threshold) {
            kept.push(*d);
        }
    }
    kept
}
