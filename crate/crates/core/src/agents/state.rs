use serde::Serialize;
use serde_json::Value;

use super::conversation::Conversation;
use super::tools::{ANONYMIZE_AND_INPAINT, AUDIT_OUTPUT, CLASSIFY_PII, LOG_OUTPUT};
use crate::llm_io::PiiInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Limits {
    pub n_max: u32,
    pub audit_cap: u32,
}

/// Progress of one image through the refinement loop.
///
/// Every flag mirrors a tool result in the conversation; `verify` checks that
/// correspondence and is run after every turn.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkflowState {
    pub classify_done: bool,
    /// The current iteration's batch has been through anonymize_and_inpaint.
    pub inpaint_done: bool,
    /// An audit ran after the current iteration's anonymization.
    pub audited: bool,
    pub audit_ok: bool,
    pub logged: bool,
    /// Current iteration, starting at 1.
    pub n: u32,
    pub audit_attempts: u32,
    /// Instances returned by the first classification.
    pub found: usize,
    /// Instances the current iteration anonymizes.
    pub batch: Vec<PiiInstance>,
    /// Residuals from the latest audit.
    pub residuals: Vec<PiiInstance>,
    pub human_review: bool,
}

impl Default for WorkflowState {
    fn default() -> Self {
        Self {
            classify_done: false,
            inpaint_done: false,
            audited: false,
            audit_ok: false,
            logged: false,
            n: 1,
            audit_attempts: 0,
            found: 0,
            batch: Vec::new(),
            residuals: Vec::new(),
            human_review: false,
        }
    }
}

impl WorkflowState {
    /// Checks the verified-completion rule: no flag or counter claims more
    /// than the executed tool results in `conv` show.
    pub fn verify(&self, conv: &Conversation, limits: Limits) -> Result<(), String> {
        let classify: Vec<(u64, Value)> = conv.executed_results(CLASSIFY_PII).map(|(m, v)| (m.seq, v)).collect();
        let anonymize: Vec<u64> = conv.executed_results(ANONYMIZE_AND_INPAINT).map(|(m, _)| m.seq).collect();
        let audits: Vec<(u64, Value)> = conv.executed_results(AUDIT_OUTPUT).map(|(m, v)| (m.seq, v)).collect();
        let logs = conv.executed_results(LOG_OUTPUT).count();

        if self.n < 1 || self.n > limits.n_max {
            return Err(format!("iteration {} outside 1..={}", self.n, limits.n_max));
        }
        if self.audit_attempts > limits.audit_cap {
            return Err(format!("audit attempts {} above cap {}", self.audit_attempts, limits.audit_cap));
        }
        if self.classify_done != !classify.is_empty() {
            return Err(format!("classify_done={} with {} classify results", self.classify_done, classify.len()));
        }
        if let Some((_, v)) = classify.first() {
            let listed = v.get("instances").and_then(Value::as_array).map_or(0, Vec::len);
            if listed != self.found {
                return Err(format!("state records {} instances, classify result lists {listed}", self.found));
            }
        }
        let want_anonymize = (self.n - 1 + u32::from(self.inpaint_done)) as usize;
        if anonymize.len() != want_anonymize {
            return Err(format!(
                "iteration {} (inpaint_done={}) needs {want_anonymize} anonymize results, found {}",
                self.n,
                self.inpaint_done,
                anonymize.len()
            ));
        }
        if self.audit_attempts as usize != audits.len() {
            return Err(format!("{} audit attempts recorded, {} audit results", self.audit_attempts, audits.len()));
        }
        let last_audit = audits.last();
        if self.audited {
            let after = matches!((last_audit, anonymize.last()), (Some((a, _)), Some(k)) if a > k);
            if !after {
                return Err("audited without an audit result after the latest anonymization".into());
            }
        }
        if self.audit_ok {
            let passed = last_audit.is_some_and(|(_, v)| v.get("ok") == Some(&Value::Bool(true)));
            if !(self.audited && passed) {
                return Err("audit_ok without a passing audit result".into());
            }
        }
        if self.logged != (logs > 0) {
            return Err(format!("logged={} with {logs} log results", self.logged));
        }
        Ok(())
    }
}
