//! The `anonymizer` binary driven as a subprocess.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anonymizer_core::geometry::{BBox, ImageDims};
use anonymizer_core::raster::BinaryMask;
use anonymizer_core::trail::normalize_timestamps;
use serde_json::Value;

const ENDPOINT_VARS: [&str; 5] = ["LVLM_URL", "AGENT_LLM_URL", "DETECT_URL", "SEGMENT_URL", "INPAINT_URL"];

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn anonymizer(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_anonymizer"));
    for v in ENDPOINT_VARS {
        cmd.env_remove(v);
    }
    cmd.args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn replay_berlin_reports_coverage_and_review() {
    let out = tempfile::tempdir().unwrap();
    let o = anonymizer(&["replay", p(&scenarios().join("berlin_000002.yaml")), "--out", p(out.path())]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("berlin_000002") && text.contains("flagged"), "{text}");
    let m = manifest(&out.path().join("berlin_000002"));
    assert!((m["coverage_percent"].as_f64().unwrap() - 4.97).abs() <= 0.01);
    assert_eq!(m["pii_pixels"], 104_143);
    assert_eq!(m["iterations"], 3);
    assert_eq!(m["flags"]["human_review"], true);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["flagged"], 1);
}

#[test]
fn clean_scenario_exits_zero() {
    let out = tempfile::tempdir().unwrap();
    let o = anonymizer(&["replay", p(&scenarios().join("zero_instance.yaml")), "--out", p(out.path())]);
    assert_eq!(code(&o), 0);
    assert_eq!(manifest(&out.path().join("zero_instance"))["iterations"], 1);
}

#[test]
fn run_on_empty_directory_succeeds() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = anonymizer(&[
        "run",
        p(input.path()),
        "--backend",
        "mock",
        "--scenario",
        p(&scenarios()),
        "--out",
        p(out.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("0 image(s)"));
}

#[test]
fn run_mock_matches_image_files_to_scenarios_by_stem() {
    let out = tempfile::tempdir().unwrap();
    let input = tempfile::tempdir().unwrap();
    // The image content is irrelevant; detections come from the scenario.
    let img = BinaryMask::empty(ImageDims::new(800, 600).unwrap()).to_gray_image();
    img.save(input.path().join("always_residual.png")).unwrap();
    img.save(input.path().join("unknown_street.png")).unwrap();
    let o = anonymizer(&[
        "run",
        p(input.path()),
        "--backend",
        "mock",
        "--scenario",
        p(&scenarios()),
        "--out",
        p(out.path()),
        "--jobs",
        "2",
    ]);
    // The unmatched file is a configuration problem for that image only.
    assert_eq!(code(&o), 4, "{}", stdout(&o));
    let m = manifest(&out.path().join("always_residual"));
    assert_eq!(m["iterations"], 3);
    assert!(m["source"].as_str().unwrap().ends_with("always_residual.png"));
    assert!(stdout(&o).contains("no scenario matches"));
}

#[test]
fn eval_identical_masks_scores_one() {
    let pred = tempfile::tempdir().unwrap();
    let dims = ImageDims::new(64, 48).unwrap();
    let mask = BinaryMask::from_bbox(&BBox::new(5, 6, 20, 10).unwrap(), dims);
    for stem in ["a", "b"] {
        mask.to_gray_image().save(pred.path().join(format!("{stem}.png"))).unwrap();
    }
    let csv = pred.path().join("scores.csv");
    let o = anonymizer(&["eval", "--pred", p(pred.path()), "--gt", p(pred.path()), "--csv", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next().unwrap(), "image,predicted,dice,iou,precision,recall");
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        for v in &cells[2..] {
            assert_eq!(v.parse::<f64>().unwrap(), 1.0, "{row}");
        }
    }
}

#[test]
fn eval_reads_pipeline_output_root() {
    let out = tempfile::tempdir().unwrap();
    let o = anonymizer(&["replay", p(&scenarios().join("always_residual.yaml")), "--out", p(out.path())]);
    assert_eq!(code(&o), 2);
    let gt = tempfile::tempdir().unwrap();
    let m = manifest(&out.path().join("always_residual"));
    let dims = ImageDims::new(800, 600).unwrap();
    let mut truth = BinaryMask::empty(dims);
    for rec in m["masks"].as_array().unwrap().iter().filter(|r| r["category"] != "traffic_sign") {
        let rle = serde_json::from_value(rec["rle"].clone()).unwrap();
        truth.union_in_place(&BinaryMask::from_rle(&rle).unwrap()).unwrap();
    }
    truth.to_gray_image().save(gt.path().join("always_residual.png")).unwrap();
    let o = anonymizer(&["eval", "--pred", p(out.path()), "--gt", p(gt.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("always_residual,yes,1.000000,1.000000,1.000000,1.000000"), "{}", stdout(&o));
}

#[test]
fn show_renders_manifest() {
    let out = tempfile::tempdir().unwrap();
    anonymizer(&["replay", p(&scenarios().join("always_residual.yaml")), "--out", p(out.path())]);
    let o = anonymizer(&["show", p(&out.path().join("always_residual"))]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for needle in ["coverage", "iterations     3", "human review   yes", "residuals", "house number plate"] {
        assert!(text.contains(needle), "missing {needle:?} in\n{text}");
    }
    let o = anonymizer(&["show", p(&out.path().join("missing"))]);
    assert_eq!(code(&o), 4);
}

#[test]
fn exit_codes() {
    let out = tempfile::tempdir().unwrap();
    let o = anonymizer(&["--help"]);
    assert_eq!(code(&o), 0);
    let o = anonymizer(&["replay"]);
    assert_eq!(code(&o), 4, "missing scenario argument");
    let o = anonymizer(&["frobnicate"]);
    assert_eq!(code(&o), 4);
    let o = anonymizer(&["replay", p(&scenarios()), "--config", "/nonexistent/cfg.toml", "--out", p(out.path())]);
    assert_eq!(code(&o), 4);
    let o = anonymizer(&["run", p(&scenarios()), "--out", p(out.path())]);
    assert_eq!(code(&o), 4, "http mode without endpoints");

    let broken = out.path().join("broken.yaml");
    std::fs::write(
        &broken,
        "version: 1\nname: broken\nimage: {synthetic: {width: 64, height: 64, seed: 1}}\n\
         detections: {error: detector offline}\n",
    )
    .unwrap();
    let o = anonymizer(&["replay", p(&broken), "--out", p(&out.path().join("o"))]);
    assert_eq!(code(&o), 3);
    let o = anonymizer(&["replay", p(&broken), p(&scenarios().join("always_residual.yaml")), "--out", p(out.path())]);
    assert_eq!(code(&o), 3, "backend failure outranks flagged");
}

#[test]
fn replays_are_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let o = anonymizer(&["replay", p(&scenarios()), "--out", p(dir.path()), "--jobs", "3"]);
        assert!(matches!(code(&o), 0 | 2));
    }
    let stems: Vec<String> = std::fs::read_dir(scenarios())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "yaml"))
        .map(|p| p.file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    assert!(stems.len() >= 4);
    for stem in &stems {
        for f in ["manifest.json", "conversation.jsonl", "events.jsonl"] {
            let read = |d: &Path| std::fs::read_to_string(d.join(stem).join(f)).unwrap();
            assert_eq!(normalize_timestamps(&read(a.path())), normalize_timestamps(&read(b.path())), "{stem}/{f}");
        }
        let png = |d: &Path| std::fs::read(d.join(stem).join("anonymized.png")).unwrap();
        assert!(png(a.path()) == png(b.path()), "{stem} image differs");
    }
}
