use super::conversation::{Conversation, MessageKind, Speaker};

/// Who speaks after the latest message.
///
/// A tool call always goes to the tool executor. A result goes back to the
/// rotation at the agent after the caller, unless it is addressed. After a
/// text turn the rotation advances, skipping one more agent when at least two
/// of the last three messages were empty texts.
pub fn next_speaker(conv: &Conversation) -> Speaker {
    let Some(last) = conv.last() else {
        return Speaker::Auditor;
    };
    if let Some(to) = last.addressee {
        return to;
    }
    match last.kind {
        MessageKind::ToolCall => Speaker::ToolExecutor,
        MessageKind::ToolResult => conv.caller_of(last).unwrap_or(Speaker::ToolExecutor).successor(),
        MessageKind::Text if last.speaker == Speaker::ToolExecutor => Speaker::Auditor,
        MessageKind::Text => {
            let next = last.speaker.successor();
            if stalled(conv) {
                next.successor()
            } else {
                next
            }
        }
    }
}

/// At least two of the last three messages are empty texts.
pub fn stalled(conv: &Conversation) -> bool {
    let m = conv.messages();
    m[m.len().saturating_sub(3)..].iter().filter(|m| m.is_empty_text()).count() >= 2
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;
    use crate::backends::ToolCall;

    fn call() -> ToolCall {
        ToolCall { name: "classify_pii".into(), arguments: "{}".into() }
    }

    #[test]
    fn tool_call_goes_to_executor_then_after_caller() {
        let mut c = Conversation::new();
        let k = c.push_tool_call(Speaker::Auditor, "", call());
        assert_eq!(next_speaker(&c), Speaker::ToolExecutor);
        c.push_tool_result(k, &json!({}), None).unwrap();
        assert_eq!(next_speaker(&c), Speaker::Orchestrator);
    }

    #[test]
    fn plain_rotation() {
        let mut c = Conversation::new();
        assert_eq!(next_speaker(&c), Speaker::Auditor);
        for (s, want) in [
            (Speaker::Auditor, Speaker::Orchestrator),
            (Speaker::Orchestrator, Speaker::Generative),
            (Speaker::Generative, Speaker::Auditor),
        ] {
            c.push_text(s, "ok", None);
            assert_eq!(next_speaker(&c), want);
        }
    }

    #[test]
    fn empty_streak_skips_one_agent() {
        let mut c = Conversation::new();
        c.push_text(Speaker::Auditor, "", None);
        c.push_text(Speaker::Orchestrator, "text", None);
        c.push_text(Speaker::Generative, " ", None);
        // plain rotation would pick the auditor
        assert_eq!(next_speaker(&c), Speaker::Orchestrator);
        c.push_text(Speaker::Orchestrator, "go", None);
        c.push_text(Speaker::Generative, "done", None);
        assert_eq!(next_speaker(&c), Speaker::Auditor);
    }

    #[test]
    fn addressee_overrides() {
        let mut c = Conversation::new();
        c.push_text(Speaker::Generative, "ack", None);
        c.push_text(Speaker::ToolExecutor, "call the tool", Some(Speaker::Generative));
        assert_eq!(next_speaker(&c), Speaker::Generative);
        let k = c.push_tool_call(Speaker::Orchestrator, "", call());
        c.push_tool_result(k, &json!({}), Some(Speaker::Auditor)).unwrap();
        assert_eq!(next_speaker(&c), Speaker::Auditor);
    }
}
