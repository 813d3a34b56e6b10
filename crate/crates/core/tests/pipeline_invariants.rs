//! End-to-end invariants over shipped and generated scenarios.

mod common;

use std::path::Path;
use std::sync::OnceLock;

use anonymizer_core::backends::scenario::Scenario;
use anonymizer_core::pipeline::{ImageReport, ImageStatus, Manifest};
use anonymizer_core::raster::BinaryMask;
use image::RgbImage;

fn mask_union(m: &Manifest, include: impl Fn(&str) -> bool) -> Vec<bool> {
    let mut out = vec![false; (m.width * m.height) as usize];
    for rec in m.masks.iter().filter(|r| include(&r.category)) {
        let mask = BinaryMask::from_rle(&rec.rle).unwrap();
        for (o, &b) in out.iter_mut().zip(mask.bits()) {
            *o |= b;
        }
    }
    out
}

/// Pixels that differ between the input and the written output but fall
/// outside every declared person, plate and indirect region.
fn stray_pixels(s: &Scenario, out_dir: &Path, m: &Manifest) -> usize {
    let before = s.load_image().unwrap();
    let after: RgbImage = image::open(out_dir.join("anonymized.png")).unwrap().to_rgb8();
    assert_eq!(before.dimensions(), after.dimensions());
    let allowed = mask_union(m, |c| c != "traffic_sign");
    before.pixels().zip(after.pixels()).zip(&allowed).filter(|((a, b), &ok)| a != b && !ok).count()
}

struct Corpus {
    _dir: tempfile::TempDir,
    scenarios: Vec<Scenario>,
    reports: Vec<ImageReport>,
}

/// Shipped plus generated scenarios, replayed once and shared by the tests
/// below.
fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let mut scenarios = common::shipped_scenarios();
        scenarios.extend((0..40).map(|i| common::generated_scenario(1000 + i, 0.3)));
        let dir = tempfile::tempdir().unwrap();
        let reports = common::replay_all(scenarios.clone(), dir.path(), 4);
        Corpus { _dir: dir, scenarios, reports }
    })
}

#[test]
fn modifications_stay_inside_declared_regions() {
    let c = corpus();
    let mut touched = 0;
    for (s, r) in c.scenarios.iter().zip(&c.reports) {
        let m = r.manifest.as_ref().unwrap_or_else(|| panic!("{}: {:?}", r.stem, r.status));
        assert_eq!(stray_pixels(s, &r.out_dir, m), 0, "{}", r.stem);
        touched += m.masks.iter().filter(|k| k.category != "traffic_sign").count();
    }
    assert!(touched > 40, "corpus exercised too few regions: {touched}");
}

#[test]
fn manifest_totals_match_masks() {
    for r in &corpus().reports {
        let m = r.manifest.as_ref().unwrap();
        let pii = mask_union(m, |c| c != "traffic_sign").iter().filter(|&&b| b).count() as u64;
        assert_eq!(m.pii_pixels, pii, "{}", r.stem);
        let pct = 100.0 * pii as f64 / (m.width as f64 * m.height as f64);
        assert!((m.coverage_percent - pct).abs() < 1e-9, "{}", r.stem);
        for (cat, &px) in &m.category_pixels {
            let union = mask_union(m, |c| c == cat).iter().filter(|&&b| b).count() as u64;
            assert_eq!(px, union, "{} {cat}", r.stem);
        }
        for rec in &m.masks {
            assert_eq!(rec.pixels, BinaryMask::from_rle(&rec.rle).unwrap().pixel_count());
            assert!(r.out_dir.join(&rec.file).is_file(), "{}", rec.file);
        }
        let on_disk: Manifest =
            serde_json::from_str(&std::fs::read_to_string(r.out_dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(on_disk.pii_pixels, m.pii_pixels);
    }
}

#[test]
fn phase_one_events_precede_phase_two() {
    for r in &corpus().reports {
        let text = std::fs::read_to_string(r.out_dir.join("events.jsonl")).unwrap();
        let events: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let phases: Vec<&str> = events.iter().map(|e| e["phase"].as_str().unwrap()).collect();
        let first_p2 = phases.iter().position(|&p| p == "phase2").unwrap_or(phases.len());
        assert!(phases[..first_p2].iter().all(|&p| p == "phase1"), "{}", r.stem);
        assert!(phases[first_p2..].iter().all(|&p| p == "phase2"), "{}", r.stem);
        let seqs: Vec<u64> = events.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
        assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1), "{}", r.stem);
    }
}

#[test]
fn bounded_iterations_and_review_flag() {
    let dir = tempfile::tempdir().unwrap();
    let scenarios: Vec<Scenario> = (0..60).map(|i| common::generated_scenario(5000 + i, 0.5)).collect();
    for r in common::replay_all(scenarios, dir.path(), 4) {
        let m = r.manifest.unwrap();
        assert!((1..=3).contains(&m.iterations), "{}", r.stem);
        assert!(m.audit_attempts <= m.iterations);
        assert_eq!(m.flags.human_review, !m.residuals.is_empty(), "{}", r.stem);
        assert_eq!(matches!(r.status, ImageStatus::Flagged), m.flags.human_review, "{}", r.stem);
    }
}

#[test]
fn one_failing_image_does_not_stop_the_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut scenarios: Vec<Scenario> = (0..3).map(|i| common::generated_scenario(7000 + i, 0.0)).collect();
    scenarios[1].detections.error = Some("detector unavailable".into());
    let reports = common::replay_all(scenarios, dir.path(), 2);
    let failed: Vec<_> = reports.iter().filter(|r| matches!(r.status, ImageStatus::Failed(_))).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].stem, "generated_7001");
    assert!(failed[0].manifest.as_ref().unwrap().flags.backend_failure);
    assert!(reports.iter().filter(|r| r.stem != "generated_7001").all(|r| r.status == ImageStatus::Ok));
    for r in &reports {
        for f in ["manifest.json", "events.jsonl", "conversation.jsonl"] {
            assert!(r.out_dir.join(f).is_file(), "{} {f}", r.stem);
        }
    }
}

#[test]
fn single_image_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let s = common::generated_scenario(42, 0.0);
    let r = common::replay_all(vec![s], dir.path(), 1).remove(0);
    for f in ["anonymized.png", "manifest.json", "events.jsonl", "conversation.jsonl"] {
        assert!(r.out_dir.join(f).is_file(), "{f}");
    }
    let m = r.manifest.unwrap();
    let masks = std::fs::read_dir(r.out_dir.join("masks")).unwrap().count();
    assert_eq!(masks, m.masks.len());
}
