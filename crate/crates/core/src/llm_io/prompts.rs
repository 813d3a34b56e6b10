use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LlmIoError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptId {
    PersonDescription,
    PersonDiversify,
    PiiClassifyCityscapes,
    PiiClassifyRedactions,
    AuditorSystem,
    OrchestratorSystem,
    GenerativeSystem,
}

impl PromptId {
    pub const ALL: [PromptId; 7] = [
        PromptId::PersonDescription,
        PromptId::PersonDiversify,
        PromptId::PiiClassifyCityscapes,
        PromptId::PiiClassifyRedactions,
        PromptId::AuditorSystem,
        PromptId::OrchestratorSystem,
        PromptId::GenerativeSystem,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptId::PersonDescription => "person_description",
            PromptId::PersonDiversify => "person_diversify",
            PromptId::PiiClassifyCityscapes => "pii_classify_cityscapes",
            PromptId::PiiClassifyRedactions => "pii_classify_redactions",
            PromptId::AuditorSystem => "auditor_system",
            PromptId::OrchestratorSystem => "orchestrator_system",
            PromptId::GenerativeSystem => "generative_system",
        }
    }

    fn embedded(self) -> &'static str {
        match self {
            PromptId::PersonDescription => include_str!("../../prompts/person_description.txt"),
            PromptId::PersonDiversify => include_str!("../../prompts/person_diversify.txt"),
            PromptId::PiiClassifyCityscapes => {
                include_str!("../../prompts/pii_classify_cityscapes.txt")
            }
            PromptId::PiiClassifyRedactions => {
                include_str!("../../prompts/pii_classify_redactions.txt")
            }
            PromptId::AuditorSystem => include_str!("../../prompts/auditor_system.txt"),
            PromptId::OrchestratorSystem => include_str!("../../prompts/orchestrator_system.txt"),
            PromptId::GenerativeSystem => include_str!("../../prompts/generative_system.txt"),
        }
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Template text with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: PromptId,
    pub body: String,
    pub required: Vec<String>,
}

impl PromptTemplate {
    pub fn new(id: PromptId, body: impl Into<String>) -> Self {
        let body = body.into();
        let required = placeholders(&body);
        Self { id, body, required }
    }

    /// Substitutes every placeholder; missing values are an error.
    pub fn render(&self, vars: &[(&str, String)]) -> Result<String, LlmIoError> {
        let lookup: BTreeMap<&str, &str> = vars.iter().map(|(k, v)| (*k, v.as_str())).collect();
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            match after.find("}}") {
                Some(end) if is_name(&after[..end]) => {
                    let name = &after[..end];
                    let value = lookup
                        .get(name)
                        .ok_or_else(|| LlmIoError::Prompt(format!("{}: no value for placeholder '{name}'", self.id)))?;
                    out.push_str(value);
                    rest = &after[end + 2..];
                }
                _ => {
                    out.push_str("{{");
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn is_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn placeholders(body: &str) -> Vec<String> {
    let mut names = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) if is_name(&after[..end]) => {
                let n = after[..end].to_string();
                if !names.contains(&n) {
                    names.push(n);
                }
                rest = &after[end + 2..];
            }
            _ => rest = after,
        }
    }
    names
}

/// All templates, embedded defaults optionally overridden from a directory
/// holding `<id>.txt` files.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<PromptId, PromptTemplate>,
}

impl PromptSet {
    pub fn embedded() -> Self {
        let templates = PromptId::ALL.iter().map(|&id| (id, PromptTemplate::new(id, id.embedded()))).collect();
        Self { templates }
    }

    pub fn load(dir: Option<&Path>) -> Result<Self, LlmIoError> {
        let mut set = Self::embedded();
        let Some(dir) = dir else {
            return Ok(set);
        };
        if !dir.is_dir() {
            return Err(LlmIoError::Prompt(format!("prompt directory {} does not exist", dir.display())));
        }
        for id in PromptId::ALL {
            let path = dir.join(format!("{id}.txt"));
            if path.is_file() {
                let body = std::fs::read_to_string(&path)
                    .map_err(|e| LlmIoError::Prompt(format!("{}: {e}", path.display())))?;
                set.templates.insert(id, PromptTemplate::new(id, body));
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: PromptId) -> &PromptTemplate {
        &self.templates[&id]
    }

    pub fn render(&self, id: PromptId, vars: &[(&str, String)]) -> Result<String, LlmIoError> {
        self.get(id).render(vars)
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::embedded()
    }
}
