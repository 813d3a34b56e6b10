//! HTTP clients for remote model services. The wire format is described in
//! `docs/backend-protocol.md`.

use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    encode_mask_png, encode_png, image_dims, AgentModel, AgentRequest, AgentTurn, BackendError, Backends, Detector,
    InpaintRequest, Inpainter, PersonDetection, SegmentRequest, SegmentResult, Segmenter, Service, ToolCall,
    VisionModel, VisionQuery, DEFAULT_TIMEOUT,
};
use crate::geometry::{BBox, Detection, ImageDims};
use crate::raster::{BinaryMask, Rle};

const MAX_BODY: u64 = 512 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpSettings {
    /// Chat endpoint of the vision-language model server.
    pub vision_url: Option<String>,
    pub vision_model: String,
    /// Chat-completions endpoint of the agent model server.
    pub agent_url: Option<String>,
    pub agent_model: String,
    /// Base URL; `/detect/{persons,plates,signs}` are appended.
    pub detect_url: Option<String>,
    pub segment_url: Option<String>,
    pub inpaint_url: Option<String>,
    /// Per-request timeout; set from the pipeline's agent timeout.
    #[serde(skip, default = "default_timeout")]
    pub timeout: Duration,
}

fn default_timeout() -> Duration {
    DEFAULT_TIMEOUT
}

impl Default for HttpSettings {
    fn default() -> Self {
        Self {
            vision_url: None,
            vision_model: "qwen2.5vl:32b".into(),
            agent_url: None,
            agent_model: "qwen2.5:32b".into(),
            detect_url: None,
            segment_url: None,
            inpaint_url: None,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

impl HttpSettings {
    /// Names of the endpoint settings that are unset.
    pub fn missing(&self) -> Vec<&'static str> {
        [
            ("LVLM_URL", &self.vision_url),
            ("AGENT_LLM_URL", &self.agent_url),
            ("DETECT_URL", &self.detect_url),
            ("SEGMENT_URL", &self.segment_url),
            ("INPAINT_URL", &self.inpaint_url),
        ]
        .into_iter()
        .filter(|(_, v)| v.as_deref().is_none_or(|s| s.trim().is_empty()))
        .map(|(k, _)| k)
        .collect()
    }

    /// All five clients; errors with the list of missing endpoints.
    pub fn backends(&self) -> Result<Backends, String> {
        let missing = self.missing();
        if !missing.is_empty() {
            return Err(format!("missing endpoint configuration: {}", missing.join(", ")));
        }
        let url = |v: &Option<String>| v.clone().expect("checked above");
        let http = Http::new(self.timeout);
        Ok(Backends {
            detector: Arc::new(HttpDetector { http: http.clone(), base: url(&self.detect_url) }),
            vision: Arc::new(HttpVision {
                http: http.clone(),
                url: url(&self.vision_url),
                model: self.vision_model.clone(),
            }),
            agent: Arc::new(HttpAgent {
                http: http.clone(),
                url: url(&self.agent_url),
                model: self.agent_model.clone(),
            }),
            segmenter: Arc::new(HttpSegmenter { http: http.clone(), url: url(&self.segment_url) }),
            inpainter: Arc::new(HttpInpainter { http, url: url(&self.inpaint_url) }),
        })
    }
}

#[derive(Clone)]
struct Http {
    agent: ureq::Agent,
    timeout: Duration,
}

impl Http {
    fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().http_status_as_error(false).timeout_global(Some(timeout)).build();
        Self { agent: config.into(), timeout }
    }

    fn map_err(service: Service, e: ureq::Error) -> BackendError {
        match e {
            ureq::Error::Timeout(_) => BackendError::Timeout { service },
            ureq::Error::StatusCode(status) => BackendError::Status { service, status, body: String::new() },
            ureq::Error::HostNotFound | ureq::Error::ConnectionFailed | ureq::Error::Io(_) => {
                BackendError::Unreachable { service, message: e.to_string() }
            }
            other => BackendError::Protocol { service, message: other.to_string() },
        }
    }

    fn post(
        &self,
        service: Service,
        url: &str,
        content_type: &str,
        body: Vec<u8>,
        timeout: Option<Duration>,
    ) -> Result<Vec<u8>, BackendError> {
        let timeout = timeout.unwrap_or(self.timeout);
        let mut resp = self
            .agent
            .post(url)
            .header("content-type", content_type)
            .config()
            .timeout_global(Some(timeout))
            .build()
            .send(body)
            .map_err(|e| Self::map_err(service, e))?;
        let status = resp.status().as_u16();
        let bytes =
            resp.body_mut().with_config().limit(MAX_BODY).read_to_vec().map_err(|e| Self::map_err(service, e))?;
        if status >= 400 {
            let body = String::from_utf8_lossy(&bytes).chars().take(500).collect();
            return Err(BackendError::Status { service, status, body });
        }
        Ok(bytes)
    }

    fn post_json(
        &self,
        service: Service,
        url: &str,
        body: &Value,
        timeout: Option<Duration>,
    ) -> Result<Value, BackendError> {
        let bytes = self.post(service, url, "application/json", body.to_string().into_bytes(), timeout)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::Protocol { service, message: format!("response is not JSON: {e}") })
    }
}

fn protocol(service: Service, message: impl Into<String>) -> BackendError {
    BackendError::Protocol { service, message: message.into() }
}

fn b64_png(image: &RgbImage) -> String {
    B64.encode(encode_png(image))
}

fn decode_png(service: Service, bytes: &[u8]) -> Result<image::DynamicImage, BackendError> {
    image::load_from_memory(bytes).map_err(|e| protocol(service, format!("undecodable image: {e}")))
}

fn decode_b64(service: Service, s: &str) -> Result<Vec<u8>, BackendError> {
    B64.decode(s.trim()).map_err(|e| protocol(service, format!("bad base64: {e}")))
}

/// Mask from a base64 PNG (non-zero = set) or an RLE object.
fn decode_mask(service: Service, v: &Value, dims: ImageDims) -> Result<BinaryMask, BackendError> {
    let mask = match v {
        Value::String(s) => {
            let img = decode_png(service, &decode_b64(service, s)?)?.to_luma8();
            BinaryMask::from_gray_image(&img).map_err(|e| protocol(service, e.to_string()))?
        }
        Value::Object(_) => {
            let rle: Rle = serde_json::from_value(v.clone()).map_err(|e| protocol(service, format!("bad RLE: {e}")))?;
            BinaryMask::from_rle(&rle).map_err(|e| protocol(service, e.to_string()))?
        }
        _ => return Err(protocol(service, "mask must be a base64 PNG or an RLE object")),
    };
    if mask.dims() != dims {
        return Err(protocol(service, format!("mask is {}, expected {dims}", mask.dims())));
    }
    Ok(mask)
}

struct HttpDetector {
    http: Http,
    base: String,
}

#[derive(Deserialize)]
struct WireDetection {
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    xyxy: Option<[f64; 4]>,
    confidence: f64,
    #[serde(default)]
    class_id: i64,
    #[serde(default)]
    mask: Option<Value>,
}

impl HttpDetector {
    fn call(&self, kind: &str, image: &RgbImage) -> Result<Vec<WireDetection>, BackendError> {
        let url = format!("{}/detect/{kind}", self.base.trim_end_matches('/'));
        let v = self.http.post_json(Service::Detect, &url, &json!({ "image": b64_png(image) }), None)?;
        let list = v.get("detections").cloned().unwrap_or(Value::Null);
        serde_json::from_value(list).map_err(|e| protocol(Service::Detect, format!("bad detections: {e}")))
    }

    fn to_detection(w: &WireDetection, dims: ImageDims) -> Result<Detection, BackendError> {
        let bbox = match (w.bbox, w.xyxy) {
            (Some([x, y, bw, bh]), _) => {
                BBox::new(x.floor() as i64, y.floor() as i64, bw.ceil() as i64, bh.ceil() as i64)
            }
            (None, Some([x1, y1, x2, y2])) => {
                BBox::from_xyxy(x1.floor() as i64, y1.floor() as i64, x2.ceil() as i64, y2.ceil() as i64)
            }
            (None, None) => return Err(protocol(Service::Detect, "detection without bbox or xyxy")),
        }
        .map_err(|e| protocol(Service::Detect, e.to_string()))?;
        if !(0.0..=1.0).contains(&w.confidence) {
            return Err(protocol(Service::Detect, format!("confidence {} outside [0, 1]", w.confidence)));
        }
        Ok(Detection::new(bbox.clamp_to(dims), w.confidence, w.class_id))
    }

    fn boxes(&self, kind: &str, image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
        let dims = image_dims(image).map_err(|e| protocol(Service::Detect, e.to_string()))?;
        self.call(kind, image)?.iter().map(|w| Self::to_detection(w, dims)).collect()
    }
}

impl Detector for HttpDetector {
    fn detect_persons(&self, image: &RgbImage) -> Result<Vec<PersonDetection>, BackendError> {
        let dims = image_dims(image).map_err(|e| protocol(Service::Detect, e.to_string()))?;
        self.call("persons", image)?
            .iter()
            .map(|w| {
                let detection = Self::to_detection(w, dims)?;
                let mask = match &w.mask {
                    Some(m) => decode_mask(Service::Detect, m, dims)?,
                    None => BinaryMask::from_bbox(&detection.bbox, dims),
                };
                Ok(PersonDetection { detection, mask })
            })
            .collect()
    }

    fn detect_plates(&self, image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
        self.boxes("plates", image)
    }

    fn detect_signs(&self, image: &RgbImage) -> Result<Vec<Detection>, BackendError> {
        self.boxes("signs", image)
    }
}

/// Message content from either a native chat response
/// (`{"message": {"content": ...}}`) or a chat-completions response
/// (`{"choices": [{"message": ...}]}`).
fn response_message(service: Service, v: &Value) -> Result<Value, BackendError> {
    v.get("message")
        .or_else(|| v.pointer("/choices/0/message"))
        .cloned()
        .ok_or_else(|| protocol(service, "response has neither message nor choices"))
}

struct HttpVision {
    http: Http,
    url: String,
    model: String,
}

impl VisionModel for HttpVision {
    fn vision_classify(&self, q: &VisionQuery<'_>) -> Result<String, BackendError> {
        let body = json!({
            "model": self.model,
            "stream": false,
            "messages": [{ "role": "user", "content": q.prompt, "images": [b64_png(q.image)] }],
            "options": { "temperature": 0 },
        });
        let v = self.http.post_json(Service::Vision, &self.url, &body, Some(q.timeout))?;
        let msg = response_message(Service::Vision, &v)?;
        msg.get("content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| protocol(Service::Vision, "message has no text content"))
    }
}

struct HttpAgent {
    http: Http,
    url: String,
    model: String,
}

impl AgentModel for HttpAgent {
    fn agent_chat(&self, req: &AgentRequest) -> Result<AgentTurn, BackendError> {
        let mut messages = vec![json!({ "role": "system", "content": req.system })];
        messages.extend(req.history.iter().map(|m| serde_json::to_value(m).expect("message serializes")));
        let mut body = json!({ "model": self.model, "messages": messages, "temperature": 0, "stream": false });
        if !req.tools.is_empty() {
            let tools: Vec<Value> = req
                .tools
                .iter()
                .map(|t| json!({ "type": "function", "function": { "name": t.name, "description": t.description, "parameters": t.parameters } }))
                .collect();
            body["tools"] = Value::Array(tools);
        }
        let v = self.http.post_json(Service::Agent, &self.url, &body, Some(req.timeout))?;
        let msg = response_message(Service::Agent, &v)?;
        let text = msg.get("content").and_then(Value::as_str).unwrap_or("").to_string();
        let tool_call = match msg.pointer("/tool_calls/0/function") {
            Some(f) => {
                let name = f
                    .get("name")
                    .and_then(Value::as_str)
                    .ok_or_else(|| protocol(Service::Agent, "tool call without a name"))?;
                let arguments = match f.get("arguments") {
                    Some(Value::String(s)) => s.clone(),
                    Some(other) => other.to_string(),
                    None => "{}".to_string(),
                };
                Some(ToolCall { name: name.to_string(), arguments })
            }
            None => None,
        };
        Ok(AgentTurn { text, tool_call })
    }
}

struct HttpSegmenter {
    http: Http,
    url: String,
}

impl Segmenter for HttpSegmenter {
    fn segment(&self, req: &SegmentRequest<'_>) -> Result<SegmentResult, BackendError> {
        let dims = image_dims(req.crop).map_err(|e| protocol(Service::Segment, e.to_string()))?;
        let body = json!({ "image": b64_png(req.crop), "prompt": req.prompt });
        let v = self.http.post_json(Service::Segment, &self.url, &body, None)?;
        if let Some(reason) = v.get("failed") {
            let reason = reason.as_str().map(str::to_string).unwrap_or_else(|| reason.to_string());
            return Ok(SegmentResult::Failed(reason));
        }
        match v.get("mask") {
            None | Some(Value::Null) => Ok(SegmentResult::Failed("no mask returned".into())),
            Some(m) => {
                let mask = decode_mask(Service::Segment, m, dims)?;
                if mask.is_empty() {
                    Ok(SegmentResult::Failed("empty mask".into()))
                } else {
                    Ok(SegmentResult::Mask(mask))
                }
            }
        }
    }
}

struct HttpInpainter {
    http: Http,
    url: String,
}

pub(crate) const MULTIPART_BOUNDARY: &str = "anonymizer-part-7d1f3c";

/// multipart/form-data body with `image`, `mask` and `params` parts.
pub(crate) fn inpaint_multipart(req: &InpaintRequest<'_>) -> Vec<u8> {
    let params = json!({
        "positive_prompt": req.positive_prompt,
        "negative_prompt": req.negative_prompt,
        "params": req.params,
    });
    let parts: [(&str, Option<&str>, &str, Vec<u8>); 3] = [
        ("image", Some("image.png"), "image/png", encode_png(req.image)),
        ("mask", Some("mask.png"), "image/png", encode_mask_png(req.mask)),
        ("params", None, "application/json", params.to_string().into_bytes()),
    ];
    let mut body = Vec::new();
    for (name, file, ctype, data) in parts {
        body.extend_from_slice(format!("--{MULTIPART_BOUNDARY}\r\n").as_bytes());
        let disposition = match file {
            Some(f) => {
                format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{f}\"\r\n")
            }
            None => format!("Content-Disposition: form-data; name=\"{name}\"\r\n"),
        };
        body.extend_from_slice(disposition.as_bytes());
        body.extend_from_slice(format!("Content-Type: {ctype}\r\n\r\n").as_bytes());
        body.extend_from_slice(&data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{MULTIPART_BOUNDARY}--\r\n").as_bytes());
    body
}

impl Inpainter for HttpInpainter {
    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<RgbImage, BackendError> {
        req.validate()?;
        let ctype = format!("multipart/form-data; boundary={MULTIPART_BOUNDARY}");
        let bytes = self.http.post(Service::Inpaint, &self.url, &ctype, inpaint_multipart(req), None)?;
        let out = decode_png(Service::Inpaint, &bytes)?.to_rgb8();
        if (out.width(), out.height()) != (req.image.width(), req.image.height()) {
            return Err(protocol(
                Service::Inpaint,
                format!(
                    "result is {}x{}, expected {}x{}",
                    out.width(),
                    out.height(),
                    req.image.width(),
                    req.image.height()
                ),
            ));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_endpoints_listed() {
        let s =
            HttpSettings { vision_url: Some("http://x".into()), segment_url: Some(" ".into()), ..Default::default() };
        assert_eq!(s.missing(), vec!["AGENT_LLM_URL", "DETECT_URL", "SEGMENT_URL", "INPAINT_URL"]);
        assert!(s.backends().is_err());
    }

    #[test]
    fn response_shapes() {
        let native = json!({"message": {"content": "hi"}});
        let openai = json!({"choices": [{"message": {"content": "hi"}}]});
        assert_eq!(
            response_message(Service::Vision, &native).unwrap(),
            response_message(Service::Vision, &openai).unwrap()
        );
        assert!(response_message(Service::Vision, &json!({})).is_err());
    }

    #[test]
    fn unreachable_service() {
        let http = Http::new(Duration::from_secs(2));
        let err = http.post_json(Service::Segment, "http://127.0.0.1:1/segment", &json!({}), None).unwrap_err();
        assert!(matches!(err, BackendError::Unreachable { .. } | BackendError::Timeout { .. }), "{err:?}");
    }
}
