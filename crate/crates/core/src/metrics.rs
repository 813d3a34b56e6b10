//! Pixel-level scores for predicted against ground-truth PII masks, and
//! per-pixel error between two images.
//!
//! Empty-mask conventions keep batch means finite: two empty masks agree
//! perfectly; an empty prediction has precision 1 and, against a non-empty
//! truth, recall 0; an empty truth gives recall 1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::ImageDims;
use crate::pipeline::read_manifest;
use crate::raster::{BinaryMask, MaskCategory};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dims(ImageDims, ImageDims),
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    ImageDims(u32, u32, u32, u32),
    #[error("cannot unify an empty mask list")]
    NoMasks,
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone)]
pub struct MaskPair {
    predicted: BinaryMask,
    ground_truth: BinaryMask,
}

/// Pixel counts behind every score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl MaskPair {
    pub fn new(predicted: BinaryMask, ground_truth: BinaryMask) -> Result<Self, MetricsError> {
        if predicted.dims() != ground_truth.dims() {
            return Err(MetricsError::Dims(predicted.dims(), ground_truth.dims()));
        }
        Ok(Self { predicted, ground_truth })
    }

    pub fn predicted(&self) -> &BinaryMask {
        &self.predicted
    }

    pub fn ground_truth(&self) -> &BinaryMask {
        &self.ground_truth
    }

    pub fn confusion(&self) -> Confusion {
        let mut c = Confusion::default();
        for (&p, &g) in self.predicted.bits().iter().zip(self.ground_truth.bits()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }

    pub fn scores(&self) -> Scores {
        self.confusion().scores()
    }
}

impl Confusion {
    pub fn scores(self) -> Scores {
        let Confusion { tp, fp, fn_ } = self;
        let ratio = |num: u64, den: u64, empty: f64| if den == 0 { empty } else { num as f64 / den as f64 };
        Scores {
            dice: ratio(2 * tp, 2 * tp + fp + fn_, 1.0),
            iou: ratio(tp, tp + fp + fn_, 1.0),
            precision: ratio(tp, tp + fp, 1.0),
            recall: ratio(tp, tp + fn_, 1.0),
        }
    }
}

pub fn dice(p: &MaskPair) -> f64 {
    p.scores().dice
}

pub fn iou_score(p: &MaskPair) -> f64 {
    p.scores().iou
}

pub fn precision(p: &MaskPair) -> f64 {
    p.scores().precision
}

pub fn recall(p: &MaskPair) -> f64 {
    p.scores().recall
}

/// Logical OR of equally sized masks.
pub fn unify(masks: &[BinaryMask]) -> Result<BinaryMask, MetricsError> {
    let first = masks.first().ok_or(MetricsError::NoMasks)?;
    let mut out = first.clone();
    for m in &masks[1..] {
        out.union_in_place(m).map_err(|_| MetricsError::Dims(first.dims(), m.dims()))?;
    }
    Ok(out)
}

/// Mean squared difference over every channel of every pixel.
pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    if a.dimensions() != b.dimensions() {
        return Err(MetricsError::ImageDims(a.width(), a.height(), b.width(), b.height()));
    }
    let n = a.as_raw().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a.as_raw().iter().zip(b.as_raw()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub image: String,
    /// False when no prediction was found; scores then compare an empty mask.
    pub predicted: bool,
    pub scores: Scores,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Mean over images that have a prediction.
    pub mean_present: Option<Scores>,
    /// Mean over all images, missing predictions scored as empty masks.
    pub mean_missing_as_empty: Option<Scores>,
}

fn mean(rows: &[&EvalRow]) -> Option<Scores> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let sum = |f: fn(&Scores) -> f64| rows.iter().map(|r| f(&r.scores)).sum::<f64>() / n;
    Some(Scores {
        dice: sum(|s| s.dice),
        iou: sum(|s| s.iou),
        precision: sum(|s| s.precision),
        recall: sum(|s| s.recall),
    })
}

fn load_mask(path: &Path) -> Result<BinaryMask, MetricsError> {
    let io = |message: String| MetricsError::Io { path: path.to_path_buf(), message };
    let img = image::open(path).map_err(|e| io(e.to_string()))?.to_luma8();
    BinaryMask::from_gray_image(&img).map_err(|e| io(e.to_string()))
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>, MetricsError> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| MetricsError::Io { path: dir.to_path_buf(), message: e.to_string() })?;
    Ok(entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p)))
        .collect())
}

/// A prediction for `stem`: either `<dir>/<stem>.png`, or the PII masks of a
/// pipeline output directory `<dir>/<stem>/` unified (signs excluded).
fn load_prediction(dir: &Path, stem: &str) -> Result<Option<BinaryMask>, MetricsError> {
    let flat = dir.join(format!("{stem}.png"));
    if flat.is_file() {
        return load_mask(&flat).map(Some);
    }
    let manifest_path = dir.join(stem).join("manifest.json");
    if !manifest_path.is_file() {
        return Ok(None);
    }
    let m =
        read_manifest(&manifest_path).map_err(|message| MetricsError::Io { path: manifest_path.clone(), message })?;
    let sign = MaskCategory::TrafficSign.as_str();
    let masks = m
        .masks
        .iter()
        .filter(|r| r.category != sign)
        .map(|r| load_mask(&dir.join(stem).join(&r.file)))
        .collect::<Result<Vec<_>, _>>()?;
    if masks.is_empty() {
        let dims = ImageDims::new(m.width, m.height)
            .map_err(|e| MetricsError::Io { path: manifest_path, message: e.to_string() })?;
        return Ok(Some(BinaryMask::empty(dims)));
    }
    unify(&masks).map(Some)
}

/// Scores every ground-truth mask in `gt_dir` against its prediction.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport, MetricsError> {
    let mut rows = Vec::new();
    for (stem, gt_path) in png_stems(gt_dir)? {
        let gt = load_mask(&gt_path)?;
        let (predicted, mask) = match load_prediction(pred_dir, &stem)? {
            Some(m) => (true, m),
            None => (false, BinaryMask::empty(gt.dims())),
        };
        let pair = MaskPair::new(mask, gt).map_err(|e| MetricsError::Io { path: gt_path, message: e.to_string() })?;
        rows.push(EvalRow { image: stem, predicted, scores: pair.scores() });
    }
    let present: Vec<&EvalRow> = rows.iter().filter(|r| r.predicted).collect();
    let all: Vec<&EvalRow> = rows.iter().collect();
    Ok(EvalReport { mean_present: mean(&present), mean_missing_as_empty: mean(&all), rows })
}

impl EvalReport {
    /// Per-image rows followed by the two aggregate rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt = |v: f64| format!("{v:.6}");
        w.write_record(["image", "predicted", "dice", "iou", "precision", "recall"]).expect("in-memory write");
        let mut put = |name: &str, predicted: &str, s: &Scores| {
            w.write_record([name, predicted, &fmt(s.dice), &fmt(s.iou), &fmt(s.precision), &fmt(s.recall)])
                .expect("in-memory write");
        };
        for r in &self.rows {
            put(&r.image, if r.predicted { "yes" } else { "no" }, &r.scores);
        }
        if let Some(s) = &self.mean_present {
            put("mean_present", "", s);
        }
        if let Some(s) = &self.mean_missing_as_empty {
            put("mean_missing_as_empty", "", s);
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}
