use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use image::RgbImage;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::config::PipelineConfig;
use super::manifest::Manifest;
use super::phase1::{Phase1, Phase1Error};
use crate::agents::{run_phase2, Conversation, ToolContext};
use crate::backends::scenario::Scenario;
use crate::backends::{image_dims, mock, Backends, Service};
use crate::llm_io::PromptSet;
use crate::trail::{EventStatus, Trail};

/// Where one image comes from.
#[derive(Debug, Clone)]
pub enum JobSource {
    File(PathBuf),
    Scenario(Arc<Scenario>),
}

#[derive(Debug, Clone)]
pub struct JobSpec {
    pub stem: String,
    pub source: JobSource,
}

impl JobSpec {
    pub fn file(path: &Path) -> Self {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        Self { stem, source: JobSource::File(path.to_path_buf()) }
    }

    pub fn scenario(s: Arc<Scenario>) -> Self {
        Self { stem: s.stem(), source: JobSource::Scenario(s) }
    }
}

/// The model services behind a batch.
#[derive(Debug, Clone)]
pub enum Provider {
    /// One shared set of remote services.
    Http(Backends),
    /// Fresh scripted services per image; file inputs are matched to a
    /// scenario by stem.
    Mock(Vec<Arc<Scenario>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    /// Input, output or scenario problems.
    Config,
    Backend,
    /// An engine contract violation.
    Engine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "failure")]
pub enum ImageStatus {
    Ok,
    Flagged,
    Failed(Failure),
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageReport {
    pub stem: String,
    pub status: ImageStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub manifest: Option<Manifest>,
}

impl ImageReport {
    fn failed(stem: &str, out_dir: PathBuf, failure: Failure, error: String, manifest: Option<Manifest>) -> Self {
        Self { stem: stem.into(), status: ImageStatus::Failed(failure), error: Some(error), out_dir, manifest }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub ok: usize,
    pub flagged: usize,
    pub failed: usize,
    pub mean_total_ms: f64,
    pub mean_phase1_ms: f64,
    pub mean_phase2_ms: f64,
    pub images: Vec<ImageReport>,
}

impl Summary {
    pub fn new(images: Vec<ImageReport>) -> Self {
        let count = |f: fn(&ImageStatus) -> bool| images.iter().filter(|r| f(&r.status)).count();
        let timed: Vec<_> = images.iter().filter_map(|r| r.manifest.as_ref().map(|m| &m.timings)).collect();
        let mean = |f: fn(&super::manifest::Timings) -> f64| {
            if timed.is_empty() {
                0.0
            } else {
                timed.iter().map(|t| f(t)).sum::<f64>() / timed.len() as f64
            }
        };
        Self {
            ok: count(|s| *s == ImageStatus::Ok),
            flagged: count(|s| *s == ImageStatus::Flagged),
            failed: count(|s| matches!(s, ImageStatus::Failed(_))),
            mean_total_ms: mean(|t| t.total_ms),
            mean_phase1_ms: mean(|t| t.phase1_ms),
            mean_phase2_ms: mean(|t| t.phase2_ms),
            images,
        }
    }

    /// 0 clean, 2 flagged for review, 3 backend failure, 4 configuration or
    /// I/O problem, 1 engine fault. The most severe outcome wins:
    /// 4, then 3, then 1, then 2.
    pub fn exit_code(&self) -> i32 {
        let has = |f: Failure| self.images.iter().any(|r| r.status == ImageStatus::Failed(f));
        if has(Failure::Config) {
            4
        } else if has(Failure::Backend) {
            3
        } else if has(Failure::Engine) {
            1
        } else if self.flagged > 0 {
            2
        } else {
            0
        }
    }
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub prompts: PromptSet,
    pub provider: Provider,
    pub out_root: PathBuf,
}

impl Pipeline {
    /// Processes every job on a pool of `jobs` threads. Reports keep input
    /// order.
    pub fn run_batch(&self, specs: &[JobSpec], jobs: usize) -> Summary {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().expect("thread pool builds");
        let reports = pool.install(|| specs.par_iter().map(|s| self.run_one(s)).collect());
        Summary::new(reports)
    }

    fn resolve(&self, spec: &JobSpec) -> Result<(RgbImage, Backends, Option<String>), String> {
        let (image, source) = match &spec.source {
            JobSource::File(p) => {
                let img = image::open(p).map_err(|e| format!("cannot read image {}: {e}", p.display()))?.to_rgb8();
                (img, Some(p.display().to_string()))
            }
            JobSource::Scenario(s) => {
                (s.load_image().map_err(|e| e.to_string())?, s.image_path().map(|p| p.display().to_string()))
            }
        };
        let dims = image_dims(&image).map_err(|e| e.to_string())?;
        let backends = match (&self.provider, &spec.source) {
            (Provider::Http(b), _) => b.clone(),
            (Provider::Mock(_), JobSource::Scenario(s)) => mock::backends(s, dims),
            (Provider::Mock(all), JobSource::File(_)) => {
                let s = all
                    .iter()
                    .find(|s| s.stem() == spec.stem)
                    .ok_or_else(|| format!("no scenario matches image '{}'", spec.stem))?;
                mock::backends(s, dims)
            }
        };
        Ok((image, backends, source))
    }

    pub fn run_one(&self, spec: &JobSpec) -> ImageReport {
        let out_dir = self.out_root.join(&spec.stem);
        if let Err(e) = std::fs::create_dir_all(out_dir.join("masks")) {
            return ImageReport::failed(
                &spec.stem,
                out_dir.clone(),
                Failure::Config,
                format!("cannot create {}: {e}", out_dir.display()),
                None,
            );
        }
        let (image, backends, source) = match self.resolve(spec) {
            Ok(v) => v,
            Err(e) => return ImageReport::failed(&spec.stem, out_dir, Failure::Config, e, None),
        };
        let run = process_image(&self.cfg, &self.prompts, &backends, &spec.stem, &image);
        let mut manifest = run.manifest;
        manifest.source = source;
        let written = write_artifacts(
            &out_dir,
            &manifest,
            &run.trail,
            &run.conversation,
            run.output.as_ref(),
            run.registry.as_ref(),
        );
        if let Err(e) = written {
            return ImageReport::failed(&spec.stem, out_dir, Failure::Config, e, Some(manifest));
        }
        let (status, error) = match run.outcome {
            Outcome::Done if manifest.flags.human_review => (ImageStatus::Flagged, None),
            Outcome::Done => (ImageStatus::Ok, None),
            Outcome::Failed(f, e) => (ImageStatus::Failed(f), Some(e)),
        };
        ImageReport { stem: spec.stem.clone(), status, error, out_dir, manifest: Some(manifest) }
    }
}

enum Outcome {
    Done,
    Failed(Failure, String),
}

struct ImageRun {
    manifest: Manifest,
    trail: Trail,
    conversation: Conversation,
    /// None when Phase 1 did not finish.
    output: Option<RgbImage>,
    registry: Option<crate::raster::MaskRegistry>,
    outcome: Outcome,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

/// Both phases on one image, with nothing written to disk.
fn process_image(
    cfg: &PipelineConfig,
    prompts: &PromptSet,
    backends: &Backends,
    stem: &str,
    image: &RgbImage,
) -> ImageRun {
    let started = Instant::now();
    let mut trail = Trail::new();
    let mut conversation = Conversation::new();
    let mut manifest = Manifest::empty(stem, image.width(), image.height());
    let finish = |m: &mut Manifest, trail: &Trail| {
        m.timings.total_ms = elapsed_ms(started);
        m.timings.agent_ms = [Service::Agent, Service::Vision].iter().filter_map(|s| trail.busy_ms().get(s)).sum();
        m.backend_calls = trail.calls().iter().map(|(k, v)| (k.to_string(), *v)).collect();
    };

    let p1 = Phase1 { cfg, prompts, backends }.run(&mut trail, stem, image);
    manifest.timings.phase1_ms = elapsed_ms(started);
    let p1 = match p1 {
        Ok(p) => p,
        Err(e) => {
            let (failure, message) = match e {
                Phase1Error::Backend(b) => (Failure::Backend, b.to_string()),
                Phase1Error::Fault(f) => (Failure::Engine, f),
            };
            trail.note("pipeline", "aborted", None, json!({ "reason": message }), EventStatus::Error);
            manifest.flags = super::manifest::Flags {
                human_review: true,
                aborted: true,
                abort_reason: Some(message.clone()),
                backend_failure: failure == Failure::Backend,
                engine_fault: (failure == Failure::Engine).then(|| message.clone()),
            };
            finish(&mut manifest, &trail);
            return ImageRun {
                manifest,
                trail,
                conversation,
                output: None,
                registry: None,
                outcome: Outcome::Failed(failure, message),
            };
        }
    };
    manifest.persons = p1.persons;
    manifest.plates = p1.plates;
    manifest.signs = p1.signs;

    let engine_cfg = cfg.engine();
    let ctx = ToolContext { backends, prompts, cfg: &engine_cfg };
    let phase2_started = Instant::now();
    let fallback_image = p1.image.clone();
    let fallback_registry = p1.registry.clone();
    let p2 = run_phase2(&ctx, stem, p1.image, p1.registry, &mut conversation, &mut trail);
    manifest.timings.phase2_ms = elapsed_ms(phase2_started);
    let run = match p2 {
        Ok(r) => r,
        Err(fault) => {
            trail.note("pipeline", "engine_fault", None, json!({ "reason": fault.0 }), EventStatus::Error);
            manifest.set_masks(&fallback_registry);
            manifest.flags = super::manifest::Flags {
                human_review: true,
                aborted: true,
                abort_reason: Some(fault.to_string()),
                backend_failure: false,
                engine_fault: Some(fault.0.clone()),
            };
            finish(&mut manifest, &trail);
            return ImageRun {
                manifest,
                trail,
                conversation,
                output: Some(fallback_image),
                registry: Some(fallback_registry),
                outcome: Outcome::Failed(Failure::Engine, fault.to_string()),
            };
        }
    };

    manifest.set_masks(&run.registry);
    manifest.iterations = run.state.n;
    manifest.audit_attempts = run.state.audit_attempts;
    manifest.instances = run.instances;
    manifest.residuals = run.residuals;
    manifest.turns = run.turns;
    manifest.flags.human_review = run.human_review;
    let mut outcome = Outcome::Done;
    if let Some(abort) = &run.abort {
        manifest.flags.aborted = true;
        manifest.flags.abort_reason = Some(abort.reason());
        manifest.flags.backend_failure = abort.is_backend();
        if abort.is_backend() {
            outcome = Outcome::Failed(Failure::Backend, abort.reason());
        }
    }
    finish(&mut manifest, &trail);
    ImageRun { manifest, trail, conversation, output: Some(run.image), registry: Some(run.registry), outcome }
}

fn write_artifacts(
    dir: &Path,
    manifest: &Manifest,
    trail: &Trail,
    conversation: &Conversation,
    output: Option<&RgbImage>,
    registry: Option<&crate::raster::MaskRegistry>,
) -> Result<(), String> {
    let io = |p: &Path, e: &dyn std::fmt::Display| format!("cannot write {}: {e}", p.display());
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| io(&p, &e))
    };
    write("conversation.jsonl", &conversation.to_jsonl())?;
    write("events.jsonl", &trail.to_jsonl())?;
    if let Some(img) = output {
        let p = dir.join("anonymized.png");
        img.save(&p).map_err(|e| io(&p, &e))?;
    }
    if let Some(reg) = registry {
        for (rec, entry) in manifest.masks.iter().zip(reg.entries()) {
            let p = dir.join(&rec.file);
            entry.mask.to_gray_image().save(&p).map_err(|e| io(&p, &e))?;
        }
    }
    write("manifest.json", &manifest.to_json())
}

/// Reads a manifest written by a previous run.
pub fn read_manifest(path: &Path) -> Result<Manifest, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("cannot parse {}: {e}", path.display()))
}
