use super::conversation::{Conversation, Speaker};
use super::state::{Limits, WorkflowState};
use crate::llm_io::{detect_completion_signal, PiiInstance};

pub const COMPLETION_SIGNAL: &str = "PIPELINE COMPLETE";

#[derive(Debug, Clone, PartialEq)]
pub enum Directive {
    InstructClassify,
    /// `residual` is set when the instances come from a failed audit.
    InstructGenerative {
        instances: Vec<PiiInstance>,
        residual: bool,
    },
    InstructAudit,
    InstructLog {
        human_review: bool,
    },
    EmitComplete,
}

impl Directive {
    pub fn name(&self) -> &'static str {
        match self {
            Directive::InstructClassify => "instruct_classify",
            Directive::InstructGenerative { .. } => "instruct_generative",
            Directive::InstructAudit => "instruct_audit",
            Directive::InstructLog { .. } => "instruct_log",
            Directive::EmitComplete => "emit_complete",
        }
    }

    /// Templated narration for the orchestrator's turn.
    pub fn narration(&self) -> String {
        match self {
            Directive::InstructClassify => "AuditorAgent: classify PII in the image using classify_pii.".into(),
            Directive::InstructGenerative { instances, residual: false } => format!(
                "Found {} instances. GenerativeAgent: anonymize them with anonymize_and_inpaint. \
                 AuditorAgent: then check the result with audit_output.",
                instances.len()
            ),
            Directive::InstructGenerative { instances, residual: true } => format!(
                "Audit left {} residuals. GenerativeAgent: anonymize the residual array from the last \
                 audit_output result. AuditorAgent: then check the result with audit_output.",
                instances.len()
            ),
            Directive::InstructAudit => "AuditorAgent: check the anonymized image with audit_output.".into(),
            Directive::InstructLog { human_review: false } => {
                "Audit passed. AuditorAgent: record the result with log_output.".into()
            }
            Directive::InstructLog { human_review: true } => {
                "Audit budget used up with residuals left; flagging for human review. \
                 AuditorAgent: record the result with log_output."
                    .into()
            }
            Directive::EmitComplete => COMPLETION_SIGNAL.into(),
        }
    }
}

/// The orchestrator's decision for its next turn, computed from verified state.
///
/// Fails (an engine bug) when the state claims progress the conversation does
/// not show.
pub fn orchestrator_step(conv: &Conversation, state: &WorkflowState, limits: Limits) -> Result<Directive, String> {
    state.verify(conv, limits)?;
    if !state.classify_done {
        return Ok(Directive::InstructClassify);
    }
    if state.found == 0 {
        return Ok(Directive::EmitComplete);
    }
    if !state.inpaint_done {
        return Ok(Directive::InstructGenerative { instances: state.batch.clone(), residual: state.n > 1 });
    }
    if !state.audited {
        return Ok(Directive::InstructAudit);
    }
    let residuals_left = !state.audit_ok && !state.residuals.is_empty();
    if residuals_left && state.audit_attempts < limits.audit_cap && state.n < limits.n_max {
        return Ok(Directive::InstructGenerative { instances: state.residuals.clone(), residual: true });
    }
    if !state.logged {
        return Ok(Directive::InstructLog { human_review: residuals_left || state.human_review });
    }
    Ok(Directive::EmitComplete)
}

/// The completion signal in the orchestrator's latest text, or a passed audit
/// that has been logged.
pub fn check_termination(conv: &Conversation, state: &WorkflowState) -> bool {
    let signalled = conv.latest_text_of(Speaker::Orchestrator).is_some_and(detect_completion_signal);
    signalled || (state.audit_ok && state.logged)
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;
    use crate::agents::tools::{ANONYMIZE_AND_INPAINT, AUDIT_OUTPUT, CLASSIFY_PII};
    use crate::backends::ToolCall;
    use crate::geometry::BBox;

    const LIMITS: Limits = Limits { n_max: 3, audit_cap: 3 };

    fn run_tool(c: &mut Conversation, who: Speaker, tool: &str, result: serde_json::Value) {
        let k = c.push_tool_call(who, "", ToolCall { name: tool.into(), arguments: "{}".into() });
        c.push_tool_result(k, &result, None).unwrap();
    }

    fn residual() -> PiiInstance {
        PiiInstance::new("sign", BBox::new(948, 0, 116, 100).unwrap())
    }

    #[test]
    fn zero_instances_completes_at_once() {
        let mut c = Conversation::new();
        run_tool(&mut c, Speaker::Auditor, CLASSIFY_PII, json!({"executed": true, "instances": []}));
        let s = WorkflowState { classify_done: true, ..Default::default() };
        assert_eq!(orchestrator_step(&c, &s, LIMITS).unwrap(), Directive::EmitComplete);
    }

    #[test]
    fn failed_audit_below_cap_reissues_residuals() {
        let mut c = Conversation::new();
        run_tool(&mut c, Speaker::Auditor, CLASSIFY_PII, json!({"executed": true, "instances": [{}]}));
        run_tool(&mut c, Speaker::Generative, ANONYMIZE_AND_INPAINT, json!({"executed": true}));
        run_tool(&mut c, Speaker::Auditor, AUDIT_OUTPUT, json!({"executed": true, "ok": false}));
        let s = WorkflowState {
            classify_done: true,
            inpaint_done: true,
            audited: true,
            found: 1,
            audit_attempts: 1,
            residuals: vec![residual()],
            ..Default::default()
        };
        let d = orchestrator_step(&c, &s, LIMITS).unwrap();
        assert_eq!(d, Directive::InstructGenerative { instances: vec![residual()], residual: true });
        assert!(d.narration().starts_with("Audit left 1 residuals"));
    }

    #[test]
    fn cap_reached_logs_with_review_flag() {
        let mut c = Conversation::new();
        run_tool(&mut c, Speaker::Auditor, CLASSIFY_PII, json!({"executed": true, "instances": [{}]}));
        for _ in 0..3 {
            run_tool(&mut c, Speaker::Generative, ANONYMIZE_AND_INPAINT, json!({"executed": true}));
            run_tool(&mut c, Speaker::Auditor, AUDIT_OUTPUT, json!({"executed": true, "ok": false}));
        }
        let s = WorkflowState {
            classify_done: true,
            inpaint_done: true,
            audited: true,
            found: 1,
            n: 3,
            audit_attempts: 3,
            residuals: vec![residual()],
            ..Default::default()
        };
        assert_eq!(orchestrator_step(&c, &s, LIMITS).unwrap(), Directive::InstructLog { human_review: true });
    }

    #[test]
    fn unverified_state_is_a_fault() {
        let c = Conversation::new();
        let s = WorkflowState { classify_done: true, found: 1, ..Default::default() };
        assert!(orchestrator_step(&c, &s, LIMITS).is_err());
    }

    #[test]
    fn termination() {
        let mut c = Conversation::new();
        let mut s = WorkflowState::default();
        assert!(!check_termination(&c, &s));
        c.push_text(Speaker::Orchestrator, "Pipeline Complete.", None);
        assert!(check_termination(&c, &s));
        c.push_text(Speaker::Orchestrator, "carry on", None);
        assert!(!check_termination(&c, &s));
        s.audit_ok = true;
        s.logged = true;
        assert!(check_termination(&c, &s));
    }
}
