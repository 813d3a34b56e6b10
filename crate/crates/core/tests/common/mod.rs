//! Brute-force reference implementations shared by the oracle and acceptance
//! targets. Each `*_mismatches` function draws `cases` random instances from
//! a fixed seed and returns how many disagree with the library.

#![allow(dead_code)]

use anonymizer_core::geometry::{iou, nms, BBox, Detection, ImageDims};
use anonymizer_core::raster::{dilate, overlap_fraction, BinaryMask, StructuringElement};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_SIDE: u32 = 64;
pub const MAX_BOXES: usize = 50;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_dims(rng: &mut impl Rng) -> ImageDims {
    ImageDims::new(rng.gen_range(1..=MAX_SIDE), rng.gen_range(1..=MAX_SIDE)).unwrap()
}

/// Either speckle noise or a handful of rectangles, so both sparse and blobby
/// masks show up.
pub fn random_mask(rng: &mut impl Rng, dims: ImageDims) -> BinaryMask {
    if rng.gen_bool(0.5) {
        let p: f64 = rng.gen_range(0.0..0.6);
        BinaryMask::from_fn(dims, |_, _| rng.gen_bool(p))
    } else {
        let rects: Vec<(u32, u32, u32, u32)> = (0..rng.gen_range(0..4))
            .map(|_| {
                let x = rng.gen_range(0..dims.width);
                let y = rng.gen_range(0..dims.height);
                (x, y, x + rng.gen_range(1..=16), y + rng.gen_range(1..=16))
            })
            .collect();
        BinaryMask::from_fn(dims, |x, y| rects.iter().any(|&(x1, y1, x2, y2)| x >= x1 && x < x2 && y >= y1 && y < y2))
    }
}

pub fn random_element(rng: &mut impl Rng) -> StructuringElement {
    let iterations = rng.gen_range(0..=3);
    if rng.gen_bool(0.5) {
        return StructuringElement::ellipse5(iterations);
    }
    let n = [1usize, 3, 5, 7][rng.gen_range(0..4)];
    let rows: Vec<String> = (0..n)
        .map(|r| (0..n).map(|c| if (r == n / 2 && c == n / 2) || rng.gen_bool(0.5) { '1' } else { '0' }).collect())
        .collect();
    let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
    StructuringElement::from_pattern(&refs, iterations).unwrap()
}

fn grid(mask: &BinaryMask) -> Vec<Vec<bool>> {
    let d = mask.dims();
    (0..d.height).map(|y| (0..d.width).map(|x| mask.get(x, y)).collect()).collect()
}

/// out(p) is set when some offset s has in(p - s) set; outside pixels are
/// unset. Repeated once per iteration.
pub fn naive_dilate(mask: &BinaryMask, se: &StructuringElement) -> Vec<Vec<bool>> {
    let mut cur = grid(mask);
    let (h, w) = (cur.len() as i64, cur[0].len() as i64);
    let offsets = se.offsets();
    for _ in 0..se.iterations {
        let mut next = vec![vec![false; w as usize]; h as usize];
        for y in 0..h {
            for x in 0..w {
                next[y as usize][x as usize] = offsets.iter().any(|&(dx, dy)| {
                    let (sx, sy) = (x - dx, y - dy);
                    sx >= 0 && sy >= 0 && sx < w && sy < h && cur[sy as usize][sx as usize]
                });
            }
        }
        cur = next;
    }
    cur
}

pub fn dilation_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..cases)
        .filter(|_| {
            let dims = random_dims(&mut r);
            let m = random_mask(&mut r, dims);
            let se = random_element(&mut r);
            grid(&dilate(&m, &se)) != naive_dilate(&m, &se)
        })
        .count()
}

/// Union, intersection, subtraction, complement and intersection count
/// against element-wise boolean arithmetic.
pub fn set_algebra_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..cases)
        .filter(|_| {
            let dims = random_dims(&mut r);
            let (a, b) = (random_mask(&mut r, dims), random_mask(&mut r, dims));
            let (ga, gb) = (a.bits().to_vec(), b.bits().to_vec());
            let zip = |f: fn(bool, bool) -> bool| ga.iter().zip(&gb).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
            let count = |v: &[bool]| v.iter().filter(|&&b| b).count() as u64;
            let and = zip(|x, y| x && y);
            let checks = [
                a.union(&b).unwrap().bits() == zip(|x, y| x || y).as_slice(),
                a.intersection(&b).unwrap().bits() == and.as_slice(),
                a.subtract(&b).unwrap().bits() == zip(|x, y| x && !y).as_slice(),
                a.complement().bits() == ga.iter().map(|&x| !x).collect::<Vec<_>>().as_slice(),
                a.intersection_count(&b).unwrap() == count(&and),
                a.union(&b).unwrap().pixel_count() == count(&zip(|x, y| x || y)),
                a.pixel_count() == count(&ga),
            ];
            checks.iter().any(|ok| !ok)
        })
        .count()
}

pub fn overlap_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..cases)
        .filter(|_| {
            let dims = random_dims(&mut r);
            let (c, p) = (random_mask(&mut r, dims), random_mask(&mut r, dims));
            let both = c.bits().iter().zip(p.bits()).filter(|(&x, &y)| x && y).count();
            let total = c.bits().iter().filter(|&&x| x).count();
            let want = if total == 0 { 0.0 } else { both as f64 / total as f64 };
            overlap_fraction(&c, &p).unwrap() != want
        })
        .count()
}

pub fn random_box(rng: &mut impl Rng) -> BBox {
    BBox::new(rng.gen_range(0..48), rng.gen_range(0..48), rng.gen_range(0..=24), rng.gen_range(0..=24)).unwrap()
}

/// IoU by counting lattice cells covered by each box.
pub fn lattice_iou(a: &BBox, b: &BBox) -> f64 {
    let inside = |bb: &BBox, x: i64, y: i64| x >= bb.x && x < bb.right() && y >= bb.y && y < bb.bottom();
    let (mut inter, mut union) = (0u64, 0u64);
    for y in a.y.min(b.y)..a.bottom().max(b.bottom()) {
        for x in a.x.min(b.x)..a.right().max(b.right()) {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Suppression written as a fixed point over an explicit ranking: a box
/// survives when no surviving box ranked above it reaches the threshold.
pub fn naive_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&i, &j| {
        let (a, b) = (&dets[i], &dets[j]);
        b.confidence.partial_cmp(&a.confidence).unwrap().then(a.bbox.x.cmp(&b.bbox.x)).then(a.bbox.y.cmp(&b.bbox.y))
    });
    let mut alive = vec![false; idx.len()];
    for k in 0..idx.len() {
        alive[k] = (0..k).all(|j| !alive[j] || lattice_iou(&dets[idx[j]].bbox, &dets[idx[k]].bbox) < thr);
    }
    idx.iter().zip(&alive).filter(|(_, &a)| a).map(|(&i, _)| dets[i]).collect()
}

pub fn random_detections(rng: &mut impl Rng) -> Vec<Detection> {
    let n = rng.gen_range(0..=MAX_BOXES);
    // A coarse confidence grid makes ties common so the tie-break is exercised.
    (0..n).map(|_| Detection::new(random_box(rng), rng.gen_range(0..=20) as f64 / 20.0, 0)).collect()
}

pub fn nms_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..cases)
        .filter(|_| {
            let dets = random_detections(&mut r);
            let thr = [0.0, 0.1, 0.3, 0.5, 0.7, 1.0][r.gen_range(0..6)];
            nms(&dets, thr) != naive_nms(&dets, thr)
        })
        .count()
}

pub fn iou_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..cases)
        .filter(|_| {
            let (a, b) = (random_box(&mut r), random_box(&mut r));
            (iou(&a, &b) - lattice_iou(&a, &b)).abs() > 1e-12
        })
        .count()
}

use std::path::Path;
use std::sync::Arc;

use anonymizer_core::backends::scenario::Scenario;
use anonymizer_core::llm_io::PromptSet;
use anonymizer_core::pipeline::{ImageReport, JobSpec, Pipeline, PipelineConfig, Provider};
use serde_json::{json, Value};

pub fn scenario_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn shipped_scenarios() -> Vec<Scenario> {
    Scenario::load_dir(&scenario_dir()).unwrap()
}

/// Replays scenarios in-process with the default configuration.
pub fn replay_all(scenarios: Vec<Scenario>, out: &Path, jobs: usize) -> Vec<ImageReport> {
    let arcs: Vec<Arc<Scenario>> = scenarios.into_iter().map(Arc::new).collect();
    let specs: Vec<JobSpec> = arcs.iter().cloned().map(JobSpec::scenario).collect();
    let p = Pipeline {
        cfg: PipelineConfig::default(),
        prompts: PromptSet::embedded(),
        provider: Provider::Mock(arcs),
        out_root: out.to_path_buf(),
    };
    p.run_batch(&specs, jobs).images
}

fn rand_box(r: &mut impl Rng, w: u32, h: u32, max: u32) -> Value {
    let bw = r.gen_range(8..=max.min(w - 1));
    let bh = r.gen_range(8..=max.min(h - 1));
    json!([r.gen_range(0..w - bw), r.gen_range(0..h - bh), bw, bh])
}

fn rand_instances(r: &mut impl Rng, w: u32, h: u32, n: usize) -> Value {
    let list: Vec<Value> = (0..n)
        .map(|i| json!({"description": format!("storefront text {i}"), "bbox": rand_box(r, w, h, 120)}))
        .collect();
    json!({ "instances": list })
}

/// A random street scene: a few detections of each kind, a classifier that
/// finds zero to three indirect items, and an auditor that reports one
/// leftover region on each pass with probability `miss_rate`.
pub fn generated_scenario(seed: u64, miss_rate: f64) -> Scenario {
    let mut r = rng(seed);
    let (w, h) = (r.gen_range(320..=960u32), r.gen_range(240..=720u32));
    let persons: Vec<Value> = (0..r.gen_range(0..4))
        .map(|_| {
            let b = rand_box(&mut r, w, h, 160);
            let mut p = json!({"bbox": b, "confidence": r.gen_range(0.1..1.0)});
            if r.gen_bool(0.5) {
                // Head and torso as two rectangles inside the box.
                let [x, y, bw, bh] = [0, 1, 2, 3].map(|i| b[i].as_i64().unwrap());
                p["mask"] = json!({"rects": [[x + bw / 4, y, bw / 2, bh / 4], [x, y + bh / 4, bw, bh * 3 / 4]]});
            }
            p
        })
        .collect();
    let boxes = |r: &mut ChaCha8Rng, n: usize, max: u32| -> Vec<Value> {
        (0..n).map(|_| json!({"bbox": rand_box(r, w, h, max), "confidence": r.gen_range(0.0..1.0)})).collect()
    };
    let (n_plates, n_signs, n_found) = (r.gen_range(0..3), r.gen_range(0..2), r.gen_range(0..=3));
    let plates = boxes(&mut r, n_plates, 60);
    let signs = boxes(&mut r, n_signs, 50);
    let classify = rand_instances(&mut r, w, h, n_found);
    let audit: Vec<Value> = (0..3)
        .map(|_| {
            let n = r.gen_bool(miss_rate) as usize;
            json!({"text": rand_instances(&mut r, w, h, n).to_string()})
        })
        .collect();
    let v = json!({
        "version": 1,
        "name": format!("generated_{seed:04}"),
        "image": {"synthetic": {"width": w, "height": h, "seed": seed}},
        "detections": {"persons": persons, "plates": plates, "signs": signs},
        "vision": {"classify": [{"text": classify.to_string()}], "audit": audit},
    });
    serde_json::from_value(v).unwrap()
}
