use std::collections::VecDeque;

use image::RgbImage;
use serde_json::{json, Value};

use super::conversation::{Conversation, MessageKind, Speaker};
use super::orchestrator::{check_termination, orchestrator_step, Directive};
use super::speaker::next_speaker;
use super::state::WorkflowState;
use super::tools::{
    auditor_audit, auditor_classify, generative_anonymize, instances_value, tool_specs, IdAllocator, ProcessedRegistry,
    ToolContext, ToolError, ANONYMIZE_AND_INPAINT, AUDIT_OUTPUT, CLASSIFY_PII, LOG_OUTPUT,
};
use super::{Abort, EngineFault, Phase2Run};
use crate::backends::{AgentRequest, AgentTurn, ToolCall};
use crate::geometry::BBox;
use crate::llm_io::{detect_completion_signal, normalize_tool_instances, tool_arguments, PiiInstance, PromptId};
use crate::raster::MaskRegistry;
use crate::trail::{EventStatus, Phase, Trail};

const ENGINE: &str = "ToolExecutor";

/// Upper bound on messages after the kickoff, per image.
pub fn turn_budget(n_max: u32) -> usize {
    9 * (n_max as usize + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Expected {
    speaker: Speaker,
    tool: &'static str,
}

struct Session<'a, 'c> {
    ctx: &'a ToolContext<'c>,
    conv: &'a mut Conversation,
    trail: &'a mut Trail,
    stem: String,
    image: RgbImage,
    registry: MaskRegistry,
    state: WorkflowState,
    processed: ProcessedRegistry,
    ids: IdAllocator,
    instances: Vec<PiiInstance>,
    expected: VecDeque<Expected>,
    failures: u32,
    last_directive: Option<Directive>,
    abort: Option<Abort>,
    completed: bool,
    premature: bool,
}

/// Runs the agent loop on a Phase 1 result until termination or abort.
///
/// `conv` and `trail` are owned by the caller so they survive an engine
/// fault.
pub fn run_phase2(
    ctx: &ToolContext<'_>,
    stem: &str,
    image: RgbImage,
    registry: MaskRegistry,
    conv: &mut Conversation,
    trail: &mut Trail,
) -> Result<Phase2Run, EngineFault> {
    trail.enter(Phase::Phase2);
    let mut s = Session {
        ctx,
        conv,
        trail,
        stem: stem.to_string(),
        image,
        registry,
        state: WorkflowState::default(),
        processed: ProcessedRegistry::default(),
        ids: IdAllocator::default(),
        instances: Vec::new(),
        expected: VecDeque::from([Expected { speaker: Speaker::Auditor, tool: CLASSIFY_PII }]),
        failures: 0,
        last_directive: None,
        abort: None,
        completed: false,
        premature: false,
    };
    s.run()?;
    Ok(s.finish())
}

impl Session<'_, '_> {
    fn limits(&self) -> super::state::Limits {
        self.ctx.cfg.limits()
    }

    fn run(&mut self) -> Result<(), EngineFault> {
        let kickoff =
            format!("Deterministic stage finished for {}. AuditorAgent: run classify_pii on this image.", self.stem);
        self.conv.push_text(Speaker::ToolExecutor, kickoff, Some(Speaker::Auditor));
        self.trail.note(ENGINE, "kickoff", None, json!({ "image": self.stem }), EventStatus::Ok);
        let budget = turn_budget(self.ctx.cfg.n_max);
        loop {
            if self.abort.is_some() || self.completed {
                break;
            }
            if check_termination(self.conv, &self.state) {
                let directed = matches!(self.last_directive, Some(Directive::EmitComplete));
                let by_fallback = self.state.audit_ok && self.state.logged;
                if !directed && !by_fallback {
                    self.premature = true;
                    self.divergence("premature_completion", json!({ "state": self.state }));
                }
                break;
            }
            let turns = self.conv.len() - 1;
            if turns >= budget {
                self.trail.note(ENGINE, "turn_budget_exhausted", None, json!({ "turns": turns }), EventStatus::Error);
                self.abort = Some(Abort::TurnBudget { turns: turns as u32 });
                break;
            }
            match next_speaker(self.conv) {
                Speaker::ToolExecutor => self.execute()?,
                Speaker::Orchestrator => self.orchestrator_turn()?,
                agent => self.agent_turn(agent)?,
            }
            self.state.verify(self.conv, self.limits()).map_err(EngineFault)?;
        }
        Ok(())
    }

    fn finish(self) -> Phase2Run {
        let residuals_left = self.state.audited && !self.state.audit_ok;
        let unverified = self.premature && self.state.found > 0 && !self.state.audit_ok;
        let human_review = self.state.human_review || residuals_left || unverified || self.abort.is_some();
        let residuals = if residuals_left { self.state.residuals.clone() } else { Vec::new() };
        Phase2Run {
            turns: (self.conv.len() - 1) as u32,
            image: self.image,
            registry: self.registry,
            state: self.state,
            instances: self.instances,
            processed: self.processed,
            residuals,
            human_review,
            abort: self.abort,
        }
    }

    fn divergence(&mut self, what: &str, detail: Value) {
        self.trail.note(ENGINE, what, None, detail, EventStatus::Warning);
    }

    fn system_prompt(&self, speaker: Speaker) -> Result<String, EngineFault> {
        let (id, vars) = match speaker {
            Speaker::Auditor => (PromptId::AuditorSystem, vec![]),
            Speaker::Generative => (PromptId::GenerativeSystem, vec![]),
            _ => (PromptId::OrchestratorSystem, vec![("audit_cap", self.ctx.cfg.audit_cap.to_string())]),
        };
        self.ctx.prompts.render(id, &vars).map_err(|e| EngineFault(e.to_string()))
    }

    fn ask(&mut self, speaker: Speaker, suggested: AgentTurn) -> Result<Option<AgentTurn>, EngineFault> {
        let role = speaker.role().expect("agents only");
        let req = AgentRequest {
            role,
            system: self.system_prompt(speaker)?,
            history: self.conv.chat_history(speaker),
            tools: tool_specs(role),
            suggested,
            timeout: self.ctx.cfg.agent_timeout,
        };
        match self.trail.agent(self.ctx.backends, &req) {
            Ok(t) => Ok(Some(t)),
            Err(e) => {
                self.abort = Some(Abort::Backend(e));
                Ok(None)
            }
        }
    }

    fn arguments_for(&self, tool: &str) -> String {
        match tool {
            ANONYMIZE_AND_INPAINT => tool_arguments(&self.state.batch),
            LOG_OUTPUT => json!({ "image": self.stem, "output": "anonymized.png" }).to_string(),
            AUDIT_OUTPUT => json!({ "output": self.stem }).to_string(),
            _ => json!({ "image": self.stem }).to_string(),
        }
    }

    fn agent_turn(&mut self, speaker: Speaker) -> Result<(), EngineFault> {
        let expected = self.expected.front().copied().filter(|e| e.speaker == speaker);
        let suggested = match expected {
            Some(e) => AgentTurn {
                text: String::new(),
                tool_call: Some(ToolCall { name: e.tool.to_string(), arguments: self.arguments_for(e.tool) }),
            },
            None => AgentTurn { text: idle_text(speaker).to_string(), tool_call: None },
        };
        let Some(turn) = self.ask(speaker, suggested)? else {
            return Ok(());
        };
        match (expected, turn.tool_call) {
            (_, Some(call)) => {
                self.conv.push_tool_call(speaker, turn.text, call);
            }
            (Some(e), None) => {
                self.conv.push_text(speaker, turn.text, None);
                self.missed(e, "answered with text instead of a tool call", None)?;
            }
            (None, None) => {
                self.conv.push_text(speaker, turn.text, None);
            }
        }
        Ok(())
    }

    /// A directed tool call did not happen. The first miss gets one
    /// re-instruction; the second aborts the image.
    fn missed(&mut self, e: Expected, why: &str, rejected_call: Option<u64>) -> Result<(), EngineFault> {
        self.failures += 1;
        self.divergence(
            "tool_not_executed",
            json!({ "agent": e.speaker.name(), "tool": e.tool, "why": why, "attempt": self.failures }),
        );
        let retry = self.failures < 2;
        let addressee = retry.then_some(e.speaker);
        let note = if retry {
            format!("{}: {} was not executed ({why}). Call {} now.", e.speaker.name(), e.tool, e.tool)
        } else {
            format!("{}: {} was not executed after re-instruction; aborting this image.", e.speaker.name(), e.tool)
        };
        match rejected_call {
            Some(seq) => {
                let result = json!({ "executed": false, "error": why, "instruction": note });
                self.conv.push_tool_result(seq, &result, addressee).map_err(|e| EngineFault(e.to_string()))?;
            }
            None => {
                self.conv.push_text(Speaker::ToolExecutor, note, addressee);
            }
        }
        if !retry {
            self.abort = Some(Abort::NoExecution { speaker: e.speaker, tool: e.tool.to_string() });
        }
        Ok(())
    }

    fn execute(&mut self) -> Result<(), EngineFault> {
        let last = self.conv.last().cloned().ok_or_else(|| EngineFault("executor spoke first".into()))?;
        let call = match (last.kind, last.tool) {
            (MessageKind::ToolCall, Some(c)) => c,
            _ => return Err(EngineFault(format!("executor has no pending call at message {}", last.seq))),
        };
        let caller = last.speaker;
        match self.expected.front().copied() {
            Some(e) if e.speaker == caller && e.tool == call.name => {
                let result = self.run_tool(e.tool, &call)?;
                let executed = result.get("executed") == Some(&Value::Bool(true));
                self.conv.push_tool_result(last.seq, &result, None).map_err(|e| EngineFault(e.to_string()))?;
                if executed {
                    self.expected.pop_front();
                    self.failures = 0;
                }
            }
            Some(e) if e.speaker == caller => {
                let why = format!("called {} where {} was expected", call.name, e.tool);
                self.missed(e, &why, Some(last.seq))?;
            }
            _ => {
                let why = format!("{} was not asked to call a tool", caller.name());
                self.divergence("unsolicited_tool_call", json!({ "agent": caller.name(), "tool": call.name }));
                let result = json!({ "executed": false, "error": why });
                self.conv.push_tool_result(last.seq, &result, None).map_err(|e| EngineFault(e.to_string()))?;
            }
        }
        Ok(())
    }

    fn backend_failure(&mut self, err: ToolError) -> Result<Value, EngineFault> {
        match err {
            ToolError::Backend(e) => {
                let v = json!({ "executed": false, "error": e.to_string() });
                self.abort = Some(Abort::Backend(e));
                Ok(v)
            }
            ToolError::Fault(f) => Err(EngineFault(f)),
        }
    }

    fn run_tool(&mut self, tool: &str, call: &ToolCall) -> Result<Value, EngineFault> {
        match tool {
            CLASSIFY_PII => self.classify(),
            ANONYMIZE_AND_INPAINT => self.anonymize(call),
            AUDIT_OUTPUT => self.audit(),
            LOG_OUTPUT => Ok(self.log()),
            other => Err(EngineFault(format!("no executor for tool {other}"))),
        }
    }

    fn classify(&mut self) -> Result<Value, EngineFault> {
        let out = match auditor_classify(self.ctx, self.trail, &self.image, &self.registry, &mut self.ids) {
            Ok(o) => o,
            Err(e) => return self.backend_failure(e),
        };
        self.state.classify_done = true;
        self.state.found = out.instances.len();
        self.state.batch = out.instances.clone();
        self.state.human_review |= out.extraction_failed;
        self.instances.extend(out.instances.iter().cloned());
        let ids: Vec<_> = out.instances.iter().filter_map(|i| i.instance_id.clone()).collect();
        self.trail.note(
            "AuditorAgent",
            CLASSIFY_PII,
            None,
            json!({ "instances": ids, "dropped": out.dropped.len(), "extraction_failed": out.extraction_failed }),
            if out.extraction_failed { EventStatus::Warning } else { EventStatus::Ok },
        );
        Ok(json!({
            "executed": true,
            "instances": instances_value(&out.instances),
            "dropped_as_protected": out.dropped.len(),
        }))
    }

    fn anonymize(&mut self, call: &ToolCall) -> Result<Value, EngineFault> {
        let directed: Vec<BBox> = self.state.batch.iter().map(|i| i.bbox).collect();
        match normalize_tool_instances(&call.arguments) {
            Ok(list) if list.iter().map(|i| i.bbox).eq(directed.iter().copied()) => {}
            Ok(list) => self.divergence(
                "arguments_differ",
                json!({ "received": instances_value(&list), "directed": instances_value(&self.state.batch) }),
            ),
            Err(e) => {
                self.divergence("arguments_unparseable", json!({ "error": e.to_string(), "raw": call.arguments }))
            }
        }
        let mut batch = std::mem::take(&mut self.state.batch);
        let res = generative_anonymize(
            self.ctx,
            self.trail,
            &mut batch,
            &self.image,
            &mut self.registry,
            &mut self.processed,
        );
        self.state.batch = batch;
        let (image, reports) = match res {
            Ok(r) => r,
            Err(e) => return self.backend_failure(e),
        };
        self.image = image;
        for done in &self.state.batch {
            if let Some(slot) = self.instances.iter_mut().find(|i| i.instance_id == done.instance_id) {
                slot.status = done.status;
            }
        }
        self.state.inpaint_done = true;
        let processed = reports.iter().filter(|r| r.pixels.is_some()).count();
        Ok(json!({ "executed": true, "processed": processed, "results": reports }))
    }

    fn audit(&mut self) -> Result<Value, EngineFault> {
        let attempt = self.state.audit_attempts + 1;
        let out = match auditor_audit(self.ctx, self.trail, &self.image, &self.registry, attempt) {
            Ok(o) => o,
            Err(e) => return self.backend_failure(e),
        };
        self.state.audit_attempts = attempt;
        self.state.audited = true;
        self.state.audit_ok = out.ok;
        self.state.residuals = out.residuals.clone();
        self.state.human_review |= out.extraction_failed;
        self.trail.note(
            "AuditorAgent",
            AUDIT_OUTPUT,
            None,
            json!({
                "attempt": attempt,
                "ok": out.ok,
                "residual": instances_value(&out.residuals),
                "max_attempts_reached": out.max_attempts_reached,
            }),
            if out.ok { EventStatus::Ok } else { EventStatus::Failed },
        );
        Ok(json!({
            "executed": true,
            "ok": out.ok,
            "residual": instances_value(&out.residuals),
            "attempt": attempt,
            "max_attempts_reached": out.max_attempts_reached,
        }))
    }

    fn log(&mut self) -> Value {
        self.state.logged = true;
        let summary = json!({
            "coverage_percent": self.registry.coverage() * 100.0,
            "pii_pixels": self.registry.pii_pixels(),
            "iterations": self.state.n,
            "audit_attempts": self.state.audit_attempts,
            "human_review": self.state.human_review,
        });
        self.trail.note("AuditorAgent", LOG_OUTPUT, None, summary.clone(), EventStatus::Ok);
        json!({ "executed": true, "logged": true, "summary": summary })
    }

    fn orchestrator_turn(&mut self) -> Result<(), EngineFault> {
        let d = orchestrator_step(self.conv, &self.state, self.limits()).map_err(EngineFault)?;
        self.apply(&d);
        self.trail.note(
            "OrchestratorAgent",
            d.name(),
            None,
            json!({ "iteration": self.state.n, "audit_attempts": self.state.audit_attempts }),
            EventStatus::Ok,
        );
        let suggested = AgentTurn { text: d.narration(), tool_call: None };
        self.last_directive = Some(d.clone());
        let Some(turn) = self.ask(Speaker::Orchestrator, suggested)? else {
            return Ok(());
        };
        let text = turn.text.clone();
        match turn.tool_call {
            Some(call) => {
                self.conv.push_tool_call(Speaker::Orchestrator, turn.text, call);
            }
            None => {
                self.conv.push_text(Speaker::Orchestrator, turn.text, None);
            }
        }
        if d == Directive::EmitComplete {
            if !detect_completion_signal(&text) {
                self.divergence("completion_signal_missing", json!({ "text": text }));
            }
            self.completed = true;
        }
        Ok(())
    }

    fn apply(&mut self, d: &Directive) {
        self.failures = 0;
        let audit = Expected { speaker: Speaker::Auditor, tool: AUDIT_OUTPUT };
        self.expected = match d {
            Directive::InstructClassify => VecDeque::from([Expected { speaker: Speaker::Auditor, tool: CLASSIFY_PII }]),
            Directive::InstructGenerative { instances, residual } => {
                if *residual && self.state.audited {
                    let mut next = instances.clone();
                    self.ids.assign(&mut next);
                    self.instances.extend(next.iter().cloned());
                    self.state.batch = next;
                    self.state.n += 1;
                    self.state.inpaint_done = false;
                    self.state.audited = false;
                    self.state.audit_ok = false;
                }
                VecDeque::from([Expected { speaker: Speaker::Generative, tool: ANONYMIZE_AND_INPAINT }, audit])
            }
            Directive::InstructAudit => VecDeque::from([audit]),
            Directive::InstructLog { human_review } => {
                self.state.human_review |= *human_review;
                VecDeque::from([Expected { speaker: Speaker::Auditor, tool: LOG_OUTPUT }])
            }
            Directive::EmitComplete => VecDeque::new(),
        };
    }
}

fn idle_text(speaker: Speaker) -> &'static str {
    match speaker {
        Speaker::Generative => "No anonymization requested.",
        _ => "Waiting for instructions.",
    }
}
