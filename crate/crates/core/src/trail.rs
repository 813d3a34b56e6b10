//! Per-image audit trail: an append-only event log plus bookkeeping for every
//! backend call (counts and wall time).
//!
//! All backend traffic during a run goes through the `Trail` wrappers so the
//! log is complete by construction.

use std::collections::BTreeMap;
use std::time::Instant;

use chrono::{SecondsFormat, Utc};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backends::{
    digest, AgentRequest, AgentTurn, BackendError, Backends, InpaintRequest, PersonDetection, SegmentRequest,
    SegmentResult, Service, VisionQuery,
};
use crate::geometry::Detection;

pub const TS_PLACEHOLDER: &str = "<ts>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Phase1,
    Phase2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventStatus {
    Ok,
    Warning,
    Skipped,
    Failed,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub ts: String,
    pub phase: Phase,
    /// Agent, tool or `backend`.
    pub actor: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs_digest: Option<String>,
    pub outputs: Value,
    pub status: EventStatus,
}

pub fn now_ts() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug, Clone)]
pub struct Trail {
    events: Vec<Event>,
    phase: Phase,
    calls: BTreeMap<Service, u64>,
    busy_ms: BTreeMap<Service, f64>,
}

impl Default for Trail {
    fn default() -> Self {
        Self::new()
    }
}

impl Trail {
    pub fn new() -> Self {
        Self { events: Vec::new(), phase: Phase::Phase1, calls: BTreeMap::new(), busy_ms: BTreeMap::new() }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Phases only move forward.
    pub fn enter(&mut self, phase: Phase) {
        self.phase = self.phase.max(phase);
    }

    pub fn record(
        &mut self,
        actor: &str,
        action: &str,
        instance_id: Option<&str>,
        inputs_digest: Option<String>,
        outputs: Value,
        status: EventStatus,
    ) {
        self.events.push(Event {
            seq: self.events.len() as u64 + 1,
            ts: now_ts(),
            phase: self.phase,
            actor: actor.to_string(),
            action: action.to_string(),
            instance_id: instance_id.map(str::to_string),
            inputs_digest,
            outputs,
            status,
        });
    }

    /// Shorthand for an event without an input digest.
    pub fn note(&mut self, actor: &str, action: &str, instance_id: Option<&str>, outputs: Value, status: EventStatus) {
        self.record(actor, action, instance_id, None, outputs, status);
    }

    pub fn calls(&self) -> &BTreeMap<Service, u64> {
        &self.calls
    }

    pub fn call_count(&self, service: Service) -> u64 {
        self.calls.get(&service).copied().unwrap_or(0)
    }

    /// Wall time spent inside backend calls, per service.
    pub fn busy_ms(&self) -> &BTreeMap<Service, f64> {
        &self.busy_ms
    }

    /// Events whose action names the given backend service.
    pub fn backend_events(&self, service: Service) -> impl Iterator<Item = &Event> {
        let name = service.to_string();
        self.events.iter().filter(move |e| e.actor == "backend" && e.action == name)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    fn backend<T>(
        &mut self,
        service: Service,
        instance_id: Option<&str>,
        inputs_digest: String,
        mut detail: Value,
        call: impl FnOnce() -> Result<T, BackendError>,
        summarize: impl FnOnce(&T) -> Value,
    ) -> Result<T, BackendError> {
        let started = Instant::now();
        let result = call();
        *self.calls.entry(service).or_default() += 1;
        *self.busy_ms.entry(service).or_default() += started.elapsed().as_secs_f64() * 1000.0;
        let status = match &result {
            Ok(v) => {
                merge(&mut detail, summarize(v));
                EventStatus::Ok
            }
            Err(e) => {
                merge(&mut detail, json!({ "error": e.to_string() }));
                EventStatus::Error
            }
        };
        self.record("backend", &service.to_string(), instance_id, Some(inputs_digest), detail, status);
        result
    }

    pub fn detect_persons(&mut self, b: &Backends, image: &RgbImage) -> Result<Vec<PersonDetection>, BackendError> {
        let d = digest(Some(image), &["persons"]);
        self.backend(
            Service::Detect,
            None,
            d,
            json!({ "kind": "persons" }),
            || b.detector.detect_persons(image),
            |v| json!({ "count": v.len() }),
        )
    }

    pub fn detect_plates(&mut self, b: &Backends, image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
        let d = digest(Some(image), &["plates"]);
        self.backend(
            Service::Detect,
            None,
            d,
            json!({ "kind": "plates" }),
            || b.detector.detect_plates(image),
            |v| json!({ "count": v.len() }),
        )
    }

    pub fn detect_signs(&mut self, b: &Backends, image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
        let d = digest(Some(image), &["signs"]);
        self.backend(
            Service::Detect,
            None,
            d,
            json!({ "kind": "signs" }),
            || b.detector.detect_signs(image),
            |v| json!({ "count": v.len() }),
        )
    }

    pub fn vision(
        &mut self,
        b: &Backends,
        q: &VisionQuery<'_>,
        instance_id: Option<&str>,
    ) -> Result<String, BackendError> {
        let d = digest(Some(q.image), &[&q.prompt]);
        self.backend(
            Service::Vision,
            instance_id,
            d,
            json!({ "purpose": q.purpose }),
            || b.vision.vision_classify(q),
            |s| json!({ "chars": s.chars().count() }),
        )
    }

    pub fn agent(&mut self, b: &Backends, req: &AgentRequest) -> Result<AgentTurn, BackendError> {
        let history: Vec<&str> = req.history.iter().map(|m| m.content.as_str()).collect();
        let mut parts = vec![req.system.as_str()];
        parts.extend(history);
        let d = digest(None, &parts);
        self.backend(
            Service::Agent,
            None,
            d,
            json!({ "role": req.role }),
            || b.agent.agent_chat(req),
            |t| json!({ "tool_call": t.tool_call.as_ref().map(|c| c.name.clone()) }),
        )
    }

    pub fn segment(
        &mut self,
        b: &Backends,
        req: &SegmentRequest<'_>,
        instance_id: &str,
    ) -> Result<SegmentResult, BackendError> {
        let d = digest(Some(req.crop), &[&req.prompt]);
        self.backend(
            Service::Segment,
            Some(instance_id),
            d,
            json!({}),
            || b.segmenter.segment(req),
            |r| match r {
                SegmentResult::Mask(m) => json!({ "mask_px": m.pixel_count() }),
                SegmentResult::Failed(reason) => json!({ "failed": reason }),
            },
        )
    }

    pub fn inpaint(
        &mut self,
        b: &Backends,
        req: &InpaintRequest<'_>,
        instance_id: Option<&str>,
    ) -> Result<RgbImage, BackendError> {
        let d = digest(Some(req.image), &[&req.positive_prompt, &req.negative_prompt]);
        let detail = json!({ "mode": req.params.control_mode, "mask_px": req.mask.pixel_count() });
        self.backend(Service::Inpaint, instance_id, d, detail, || b.inpainter.inpaint(req), |_| json!({}))
    }
}

fn merge(into: &mut Value, from: Value) {
    if let (Value::Object(a), Value::Object(b)) = (into, from) {
        a.extend(b);
    }
}

/// Replaces every `ts` value with a placeholder and zeroes every number under
/// a `timings` object, so two runs can be compared byte for byte. Accepts a
/// single JSON document or JSON Lines; non-JSON lines pass through.
pub fn normalize_timestamps(text: &str) -> String {
    fn walk(v: &mut Value, in_timings: bool) {
        match v {
            Value::Object(m) => {
                for (k, child) in m.iter_mut() {
                    if k == "ts" {
                        *child = Value::String(TS_PLACEHOLDER.into());
                    } else {
                        walk(child, in_timings || k == "timings");
                    }
                }
            }
            Value::Array(a) => a.iter_mut().for_each(|c| walk(c, in_timings)),
            Value::Number(_) if in_timings => *v = json!(0),
            _ => {}
        }
    }
    let normalize = |s: &str, pretty: bool| match serde_json::from_str::<Value>(s) {
        Ok(mut v) => {
            walk(&mut v, false);
            if pretty {
                serde_json::to_string_pretty(&v).expect("value serializes")
            } else {
                serde_json::to_string(&v).expect("value serializes")
            }
        }
        Err(_) => s.to_string(),
    };
    if serde_json::from_str::<Value>(text).is_ok() {
        return normalize(text, text.trim_start().starts_with('{') && text.contains('\n'));
    }
    let mut out = String::new();
    for line in text.lines() {
        out.push_str(&normalize(line, false));
        out.push('\n');
    }
    out
}
