//! Loop properties under randomly misbehaving agents: termination, verified
//! completion, dedup soundness, monotone progress and determinism.

mod common;

use anonymizer_core::agents::turn_budget;
use anonymizer_core::backends::scenario::{AgentOverride, ReplyInstance, Scenario, VisionReply};
use anonymizer_core::backends::{AgentRole, ToolCall};
use anonymizer_core::geometry::{iou, BBox};
use anonymizer_core::llm_io::InstanceStatus;
use anonymizer_core::pipeline::{Failure, ImageReport, ImageStatus, Manifest};
use proptest::prelude::*;
use serde_json::Value;

#[derive(Debug, Clone)]
enum Misbehavior {
    TextOnly,
    WrongTool,
    Complete,
    Error,
}

fn arb_override() -> impl Strategy<Value = (AgentRole, usize, Misbehavior)> {
    let role = prop_oneof![Just(AgentRole::Auditor), Just(AgentRole::Generative), Just(AgentRole::Orchestrator)];
    let kind = prop_oneof![
        4 => Just(Misbehavior::TextOnly),
        3 => Just(Misbehavior::WrongTool),
        2 => Just(Misbehavior::Complete),
        1 => Just(Misbehavior::Error),
    ];
    (role, 1usize..8, kind)
}

fn apply(s: &mut Scenario, overrides: &[(AgentRole, usize, Misbehavior)]) {
    for (role, call, kind) in overrides {
        if s.agent.iter().any(|o| o.role == *role && o.call == *call) {
            continue;
        }
        let mut o =
            AgentOverride { role: *role, call: *call, text: None, tool_call: None, no_tool: false, error: None };
        match kind {
            Misbehavior::TextOnly => {
                o.no_tool = true;
                o.text = Some("Done, the image looks clean.".into());
            }
            Misbehavior::WrongTool => {
                o.tool_call = Some(ToolCall { name: "log_output".into(), arguments: "{}".into() });
            }
            Misbehavior::Complete => o.text = Some("All finished. PIPELINE COMPLETE".into()),
            Misbehavior::Error => o.error = Some("connection reset".into()),
        }
        s.agent.push(o);
    }
}

fn one_finding(s: &mut Scenario) {
    let found = ReplyInstance { description: "graffiti tag".into(), bbox: BBox::new(20, 20, 40, 30).unwrap() };
    s.vision.classify.replies = vec![VisionReply::Instances(vec![found])];
    s.detections.signs.clear();
}

fn run(s: Scenario) -> (ImageReport, Vec<Value>, Vec<Value>) {
    let dir = tempfile::tempdir().unwrap();
    let r = common::replay_all(vec![s], dir.path(), 1).remove(0);
    let lines = |f: &str| -> Vec<Value> {
        std::fs::read_to_string(r.out_dir.join(f)).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    };
    let (conv, events) = (lines("conversation.jsonl"), lines("events.jsonl"));
    (r, conv, events)
}

fn tool_results(conv: &[Value], tool: &str) -> Vec<Value> {
    conv.iter()
        .filter(|m| m["kind"] == "tool_result")
        .filter(|m| {
            let call = m["reply_to"].as_u64().unwrap();
            conv.iter().any(|c| c["seq"].as_u64() == Some(call) && c["tool"]["name"] == tool)
        })
        .map(|m| serde_json::from_str::<Value>(m["payload"].as_str().unwrap()).unwrap())
        .filter(|v| v["executed"] == true)
        .collect()
}

fn strip(mut m: Manifest) -> Manifest {
    m.timings = Default::default();
    m
}

fn strip_ts(conv: &[Value]) -> Vec<Value> {
    conv.iter()
        .cloned()
        .map(|mut m| {
            m.as_object_mut().unwrap().remove("ts");
            m
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn loop_properties_hold(
        seed in 0u64..100_000,
        miss in 0.0f64..0.8,
        overrides in proptest::collection::vec(arb_override(), 0..4),
    ) {
        let mut s = common::generated_scenario(seed, miss);
        apply(&mut s, &overrides);
        let (r, conv, events) = run(s.clone());

        // Liveness: always ends, within the turn budget and the iteration cap.
        prop_assert!(!matches!(r.status, ImageStatus::Failed(Failure::Engine)), "{:?}", r.error);
        let m = r.manifest.clone().unwrap();
        prop_assert!(m.turns as usize <= turn_budget(3));
        prop_assert!((1..=3).contains(&m.iterations));
        prop_assert!(m.audit_attempts <= 3 && m.audit_attempts <= m.iterations);

        // Verified completion: a clean result is backed by an executed
        // passing audit, or by a classification that found nothing. Ending
        // before the log step is allowed but must leave a trace.
        if r.status == ImageStatus::Ok {
            let found = tool_results(&conv, "classify_pii");
            prop_assert_eq!(found.len(), 1);
            let nothing = found[0]["instances"].as_array().unwrap().is_empty();
            let audits = tool_results(&conv, "audit_output");
            let passed = audits.last().is_some_and(|a| a["ok"] == true);
            let logged = !tool_results(&conv, "log_output").is_empty();
            prop_assert!(nothing || passed, "unverified clean result");
            let premature = events.iter().any(|e| e["action"] == "premature_completion");
            prop_assert!(nothing || logged || premature);
            prop_assert!(!m.flags.human_review && !m.flags.aborted);
        }
        if m.flags.aborted {
            prop_assert!(m.flags.human_review);
        }

        // Dedup soundness.
        let processed: Vec<_> = m.instances.iter().filter(|i| i.status == InstanceStatus::Processed).collect();
        for (i, a) in processed.iter().enumerate() {
            for b in &processed[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) < 0.3, "{:?} / {:?}", a.bbox, b.bbox);
            }
        }
        for skipped in m.instances.iter().filter(|i| i.status == InstanceStatus::SkippedIouOverlap) {
            prop_assert!(processed.iter().any(|p| iou(&p.bbox, &skipped.bbox) >= 0.3));
        }

        // Monotone progress: counters never go back, masks only accumulate.
        let mut last = (0u64, 0u64);
        for e in events.iter().filter(|e| e["actor"] == "OrchestratorAgent") {
            let now = (e["outputs"]["iteration"].as_u64().unwrap(), e["outputs"]["audit_attempts"].as_u64().unwrap());
            prop_assert!(now.0 >= last.0 && now.1 >= last.1);
            last = now;
        }
        let first_indirect = m.masks.iter().position(|k| k.category == "indirect_pii").unwrap_or(m.masks.len());
        prop_assert!(m.masks[first_indirect..].iter().all(|k| k.category == "indirect_pii"));

        // Determinism.
        let (r2, conv2, _) = run(s);
        prop_assert_eq!(strip(r2.manifest.unwrap()), strip(m));
        prop_assert_eq!(strip_ts(&conv2), strip_ts(&conv));
    }
}

#[test]
fn single_miss_recovers_after_reinstruction() {
    let mut s = common::generated_scenario(3, 0.0);
    one_finding(&mut s);
    apply(&mut s, &[(AgentRole::Generative, 1, Misbehavior::TextOnly)]);
    let (r, conv, events) = run(s);
    assert_eq!(r.status, ImageStatus::Ok, "{:?}", r.error);
    assert!(events.iter().any(|e| e["action"] == "tool_not_executed"));
    assert_eq!(tool_results(&conv, "anonymize_and_inpaint").len(), 1);
}

#[test]
fn second_miss_aborts_with_review() {
    let mut s = common::generated_scenario(3, 0.0);
    one_finding(&mut s);
    apply(
        &mut s,
        &[(AgentRole::Generative, 1, Misbehavior::TextOnly), (AgentRole::Generative, 2, Misbehavior::WrongTool)],
    );
    let (r, _, _) = run(s);
    let m = r.manifest.unwrap();
    assert_eq!(r.status, ImageStatus::Flagged);
    assert!(m.flags.aborted && m.flags.human_review);
    assert!(m.flags.abort_reason.unwrap().contains("anonymize_and_inpaint"));
}

#[test]
fn agent_service_error_fails_as_backend() {
    let mut s = common::generated_scenario(3, 0.0);
    apply(&mut s, &[(AgentRole::Auditor, 1, Misbehavior::Error)]);
    let (r, _, _) = run(s);
    assert_eq!(r.status, ImageStatus::Failed(Failure::Backend));
    assert!(r.manifest.unwrap().flags.backend_failure);
}

#[test]
fn early_completion_claim_is_not_trusted() {
    let mut s = common::generated_scenario(3, 0.0);
    one_finding(&mut s);
    apply(&mut s, &[(AgentRole::Orchestrator, 1, Misbehavior::Complete)]);
    let (r, _, events) = run(s);
    let m = r.manifest.unwrap();
    assert!(events.iter().any(|e| e["action"] == "premature_completion"));
    assert!(m.flags.human_review, "completion without a passing audit must be reviewed");
}
