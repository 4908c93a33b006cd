//! Prompt templates for base and sociodemographic prompts.
//!
//! Placeholders: `{q}` question text, `{answer choices}` the enumerated
//! choices, `{l}` number of choices, `{att}` / `{c}` demographic attribute
//! and value.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ElicitError;
use crate::opinion::{GroupKey, PromptKind, SurveyQuestion};

/// One concrete prompt shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TemplateMethod {
    Verbalized,
    SelfRandom,
    /// 1..=5
    Paraphrase(u8),
    Logprob,
}

impl TemplateMethod {
    pub const ALL: [TemplateMethod; 8] = [
        TemplateMethod::Verbalized,
        TemplateMethod::SelfRandom,
        TemplateMethod::Paraphrase(1),
        TemplateMethod::Paraphrase(2),
        TemplateMethod::Paraphrase(3),
        TemplateMethod::Paraphrase(4),
        TemplateMethod::Paraphrase(5),
        TemplateMethod::Logprob,
    ];

    pub fn file_stem(self) -> String {
        match self {
            TemplateMethod::Verbalized => "verbalized".into(),
            TemplateMethod::SelfRandom => "self_random".into(),
            TemplateMethod::Paraphrase(i) => format!("paraphrase_{i}"),
            TemplateMethod::Logprob => "logprob".into(),
        }
    }
}

impl fmt::Display for TemplateMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.file_stem())
    }
}

macro_rules! builtin {
    ($kind:literal, $stem:literal) => {
        include_str!(concat!("../../templates/", $kind, "/", $stem, ".txt"))
    };
}

fn builtin_text(kind: PromptKind, method: TemplateMethod) -> &'static str {
    use TemplateMethod::*;
    match (kind, method) {
        (PromptKind::Base, Verbalized) => builtin!("base", "verbalized"),
        (PromptKind::Base, SelfRandom) => builtin!("base", "self_random"),
        (PromptKind::Base, Logprob) => builtin!("base", "logprob"),
        (PromptKind::Base, Paraphrase(1)) => builtin!("base", "paraphrase_1"),
        (PromptKind::Base, Paraphrase(2)) => builtin!("base", "paraphrase_2"),
        (PromptKind::Base, Paraphrase(3)) => builtin!("base", "paraphrase_3"),
        (PromptKind::Base, Paraphrase(4)) => builtin!("base", "paraphrase_4"),
        (PromptKind::Base, Paraphrase(_)) => builtin!("base", "paraphrase_5"),
        (PromptKind::Sd, Verbalized) => builtin!("sd", "verbalized"),
        (PromptKind::Sd, SelfRandom) => builtin!("sd", "self_random"),
        (PromptKind::Sd, Logprob) => builtin!("sd", "logprob"),
        (PromptKind::Sd, Paraphrase(1)) => builtin!("sd", "paraphrase_1"),
        (PromptKind::Sd, Paraphrase(2)) => builtin!("sd", "paraphrase_2"),
        (PromptKind::Sd, Paraphrase(3)) => builtin!("sd", "paraphrase_3"),
        (PromptKind::Sd, Paraphrase(4)) => builtin!("sd", "paraphrase_4"),
        (PromptKind::Sd, Paraphrase(_)) => builtin!("sd", "paraphrase_5"),
    }
}

const PLACEHOLDERS: [&str; 5] = ["q", "answer choices", "l", "att", "c"];
const SD_ONLY: [&str; 2] = ["att", "c"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub method: TemplateMethod,
    pub kind: PromptKind,
    pub text: String,
}

impl PromptTemplate {
    /// Placeholder names appearing in the template, in order.
    pub fn placeholders(&self) -> Vec<&str> {
        let mut out = Vec::new();
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            let Some(len) = rest[open..].find('}') else { break };
            out.push(&rest[open + 1..open + len]);
            rest = &rest[open + len + 1..];
        }
        out
    }

    fn check(&self) -> Result<(), ElicitError> {
        for name in self.placeholders() {
            if !PLACEHOLDERS.contains(&name) {
                return Err(ElicitError::Template(format!("{} template: unknown placeholder {{{name}}}", self.method)));
            }
            if self.kind == PromptKind::Base && SD_ONLY.contains(&name) {
                return Err(ElicitError::Template(format!(
                    "base {} template uses {{{name}}}",
                    self.method
                )));
            }
        }
        Ok(())
    }

    /// Substitutes every placeholder. Values are inserted in a single pass,
    /// so braces inside question text are left alone.
    pub fn render(&self, question: &SurveyQuestion, group: &GroupKey) -> Result<String, ElicitError> {
        if self.kind == PromptKind::Sd && group.is_all() {
            return Err(ElicitError::Template("sociodemographic prompt needs a demographic group".into()));
        }
        let choices = format_answer_choices(&question.choices);
        let k = question.choices.len().to_string();
        let mut out = String::with_capacity(self.text.len() + question.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            let Some(len) = rest[open..].find('}') else { break };
            out.push_str(&rest[..open]);
            let value = match &rest[open + 1..open + len] {
                "q" => question.text.as_str(),
                "answer choices" => choices.as_str(),
                "l" => k.as_str(),
                "att" => group.attribute.as_str(),
                "c" => group.value.as_str(),
                other => return Err(ElicitError::Template(format!("unknown placeholder {{{other}}}"))),
            };
            out.push_str(value);
            rest = &rest[open + len + 1..];
        }
        out.push_str(rest);
        Ok(out.trim_end().to_string())
    }
}

/// `(1) a, (2) b, or (3) c`; two choices read `(1) a or (2) b`.
pub fn format_answer_choices(choices: &[String]) -> String {
    let items: Vec<String> = choices.iter().enumerate().map(|(i, c)| format!("({}) {c}", i + 1)).collect();
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        2 => format!("{} or {}", items[0], items[1]),
        n => format!("{}, or {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

/// All sixteen templates, built in or loaded from a directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<(PromptKind, TemplateMethod), PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let mut templates = BTreeMap::new();
        for kind in [PromptKind::Base, PromptKind::Sd] {
            for method in TemplateMethod::ALL {
                templates.insert(
                    (kind, method),
                    PromptTemplate {
                        method,
                        kind,
                        text: builtin_text(kind, method).to_string(),
                    },
                );
            }
        }
        TemplateSet { templates }
    }

    /// Reads `<dir>/{base,sd}/<stem>.txt`; files that are absent keep the
    /// built-in text.
    pub fn from_dir(dir: &Path) -> Result<Self, ElicitError> {
        let mut set = Self::builtin();
        for ((kind, method), template) in set.templates.iter_mut() {
            let path = dir.join(kind.as_str()).join(format!("{}.txt", method.file_stem()));
            match std::fs::read_to_string(&path) {
                Ok(text) => template.text = text,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(ElicitError::Template(format!("{}: {e}", path.display()))),
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), ElicitError> {
        for t in self.templates.values() {
            t.check()?;
            if t.method == TemplateMethod::Verbalized && !t.text.contains("Expected response format: [, , , ,]") {
                log::warn!("{} verbalized template lacks the expected-format line", t.kind);
            }
        }
        Ok(())
    }

    pub fn get(&self, kind: PromptKind, method: TemplateMethod) -> &PromptTemplate {
        &self.templates[&(kind, method)]
    }

    /// Base wording for the all-respondents group, SD wording otherwise.
    pub fn render(&self, method: TemplateMethod, question: &SurveyQuestion, group: &GroupKey) -> Result<String, ElicitError> {
        let kind = if group.is_all() { PromptKind::Base } else { PromptKind::Sd };
        self.get(kind, method).render(question, group)
    }
}
