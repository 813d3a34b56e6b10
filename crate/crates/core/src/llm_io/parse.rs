use serde_json::Value;

use super::instance::PiiInstance;
use super::literal::{balanced_span, parse_sequence, parse_value};
use super::LlmIoError;

const MAX_STRING_DEPTH: usize = 4;

fn decode(src: &str) -> Option<Value> {
    serde_json::from_str(src).ok().or_else(|| parse_value(src).ok())
}

/// Lists carried under `instances` (or `residual`, the audit tool's key).
fn instance_list(v: &Value) -> Option<&Value> {
    v.get("instances").or_else(|| v.get("residual"))
}

/// Flattens arrays, nested arrays and strings holding one or more dict
/// literals into a flat list of entries.
fn flatten(v: &Value, depth: usize, out: &mut Vec<Value>) -> Result<(), String> {
    match v {
        Value::Array(items) => {
            for item in items {
                flatten(item, depth, out)?;
            }
            Ok(())
        }
        Value::Object(_) => match instance_list(v) {
            Some(inner) if v.get("bbox").is_none() => flatten(inner, depth, out),
            _ => {
                out.push(v.clone());
                Ok(())
            }
        },
        Value::String(s) => {
            if depth >= MAX_STRING_DEPTH {
                return Err("strings nested too deeply".into());
            }
            let trimmed = s.trim();
            let parsed = match serde_json::from_str::<Value>(trimmed) {
                Ok(v @ (Value::Array(_) | Value::Object(_))) => vec![v],
                _ => parse_sequence(trimmed).map_err(|e| format!("string element is not a dict literal: {e}"))?,
            };
            for p in &parsed {
                flatten(p, depth + 1, out)?;
            }
            Ok(())
        }
        other => Err(format!("unexpected element {other}")),
    }
}

/// Pulls the classifier's instance list out of raw model text.
///
/// Code fences and prose around the JSON are ignored. Entries without a
/// description or a four-integer bbox are dropped; at most `max_instances`
/// survive, in order.
pub fn extract_instances_json(raw: &str, max_instances: usize) -> Result<Vec<PiiInstance>, LlmIoError> {
    let value = locate_json(raw).ok_or_else(|| LlmIoError::Extraction { raw: raw.to_string() })?;
    let list = match &value {
        Value::Object(_) => match instance_list(&value) {
            Some(l) => l.clone(),
            None if value.get("bbox").is_some() => Value::Array(vec![value.clone()]),
            None => return Err(LlmIoError::Extraction { raw: raw.to_string() }),
        },
        Value::Array(_) => value.clone(),
        _ => return Err(LlmIoError::Extraction { raw: raw.to_string() }),
    };
    let mut entries = Vec::new();
    if flatten(&list, 0, &mut entries).is_err() {
        entries.clear();
        if let Value::Array(items) = &list {
            entries.extend(items.iter().cloned());
        }
    }
    Ok(entries.iter().filter_map(|e| PiiInstance::from_entry(e, true).ok()).take(max_instances).collect())
}

/// Outermost decodable bracketed values in `raw`, preferring an object with
/// an instance list, then an object with a bbox, then any array.
fn locate_json(raw: &str) -> Option<Value> {
    let trimmed = raw.trim();
    if let Some(v) = decode(trimmed).filter(|v| v.is_object() || v.is_array()) {
        return Some(v);
    }
    let mut found = Vec::new();
    let mut from = 0;
    while let Some(off) = raw[from..].find(['{', '[']) {
        let start = from + off;
        match balanced_span(raw, start).and_then(|(a, b)| decode(&raw[a..b]).map(|v| (v, b))) {
            Some((v, end)) => {
                found.push(v);
                from = end;
            }
            None => from = start + 1,
        }
    }
    let pick = |pred: &dyn Fn(&Value) -> bool| found.iter().find(|v| pred(v)).cloned();
    pick(&|v| v.is_object() && instance_list(v).is_some())
        .or_else(|| pick(&|v| v.get("bbox").is_some()))
        .or_else(|| pick(&|v| v.is_array()))
}

/// Normalizes an `anonymize_and_inpaint` argument payload.
///
/// Accepts the argument object (`{"instances": ...}`) or the bare list, in
/// any of these shapes: an array of objects; an array holding one string of
/// comma-separated dict literals; an array of individually stringified
/// dicts; nested lists. Single-quoted literals are accepted throughout.
pub fn normalize_tool_instances(raw: &str) -> Result<Vec<PiiInstance>, LlmIoError> {
    let fail = |reason: String| LlmIoError::Normalization { reason, raw: raw.to_string() };
    let trimmed = raw.trim();
    let value = match decode(trimmed) {
        Some(v) => v,
        None => {
            let seq = parse_sequence(trimmed).map_err(|e| fail(format!("unparseable payload: {e}")))?;
            Value::Array(seq)
        }
    };
    let list = match &value {
        Value::Object(_) if value.get("bbox").is_none() => match instance_list(&value) {
            Some(l) => l.clone(),
            None => return Err(fail("object without an instances list".into())),
        },
        Value::Object(_) | Value::Array(_) | Value::String(_) => value.clone(),
        other => return Err(fail(format!("unexpected payload {other}"))),
    };
    let mut entries = Vec::new();
    flatten(&list, 0, &mut entries).map_err(fail)?;
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| PiiInstance::from_entry(e, false).map_err(|r| fail(format!("entry {i}: {r}"))))
        .collect()
}

/// Serializes instances into the tool-argument object form.
pub fn tool_arguments(instances: &[PiiInstance]) -> String {
    let list: Vec<Value> = instances.iter().map(PiiInstance::to_tool_value).collect();
    serde_json::json!({ "instances": list }).to_string()
}
