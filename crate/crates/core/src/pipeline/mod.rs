//! Per-image orchestration: the deterministic first pass, the agent loop,
//! and the artifacts each image leaves behind.
//!
//! Output layout per image, under `<out>/<stem>/`:
//! `anonymized.png`, `masks/*.png`, `conversation.jsonl`, `events.jsonl`
//! and `manifest.json`.

pub mod config;
pub mod job;
pub mod manifest;
pub mod phase1;

pub use config::{ConfigError, Dataset, Palette, PipelineConfig};
pub use job::{read_manifest, Failure, ImageReport, ImageStatus, JobSource, JobSpec, Pipeline, Provider, Summary};
pub use manifest::{Flags, Manifest, MaskRecord, Timings, MANIFEST_VERSION};
pub use phase1::{PersonRecord, Phase1, Phase1Error, Phase1Output};
