//! Prompt templates with `{slot}` placeholders.
//!
//! Built-in texts live in `prompts/*.txt` and are compiled in. A directory
//! holding files with the same names overrides them one by one. `{{` and
//! `}}` render as literal braces.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("template `{template}`: unknown slot `{slot}`")]
    UnknownSlot { template: String, slot: String },
    #[error("template `{template}`: slot `{slot}` was not provided")]
    MissingSlot { template: String, slot: String },
    #[error("template `{template}`: unbalanced brace at byte {offset}")]
    Syntax { template: String, offset: usize },
    #[error("cannot read prompt override {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateKind {
    Planner,
    Generator,
    Proposer,
    Verifier,
    SchemaLink,
    Judge,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 6] = [
        TemplateKind::Planner,
        TemplateKind::Generator,
        TemplateKind::Proposer,
        TemplateKind::Verifier,
        TemplateKind::SchemaLink,
        TemplateKind::Judge,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::Planner => "planner.txt",
            TemplateKind::Generator => "generator.txt",
            TemplateKind::Proposer => "proposer.txt",
            TemplateKind::Verifier => "verifier.txt",
            TemplateKind::SchemaLink => "schema_link.txt",
            TemplateKind::Judge => "judge.txt",
        }
    }

    pub fn slots(self) -> &'static [&'static str] {
        match self {
            TemplateKind::Planner => {
                &["tools", "guidelines", "failure_examples", "correct_examples", "question", "paraphrase"]
            }
            TemplateKind::Generator => &[
                "instructions",
                "sql_guidelines",
                "dialect_rules",
                "examples",
                "table_info",
                "table_names",
                "external_knowledge",
                "question",
            ],
            TemplateKind::Proposer => &[
                "sql_guidelines",
                "dialect_rules",
                "question",
                "paraphrase",
                "exploratory",
                "failures",
                "successes",
                "finals",
            ],
            TemplateKind::Verifier => &["question", "sql", "executed_result", "guidelines"],
            TemplateKind::SchemaLink => &["tables", "external_knowledge", "question"],
            TemplateKind::Judge => &["probes"],
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateKind::Planner => include_str!("../prompts/planner.txt"),
            TemplateKind::Generator => include_str!("../prompts/generator.txt"),
            TemplateKind::Proposer => include_str!("../prompts/proposer.txt"),
            TemplateKind::Verifier => include_str!("../prompts/verifier.txt"),
            TemplateKind::SchemaLink => include_str!("../prompts/schema_link.txt"),
            TemplateKind::Judge => include_str!("../prompts/judge.txt"),
        }
    }
}

/// Slot-free text blocks that fill template slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fragment {
    PlannerGuidelines,
    PlannerFailureExamples,
    PlannerCorrectExamples,
    GeneratorInstructions,
    GeneratorExamples,
    SqlGuidelines,
    VerifierGuidelines,
}

impl Fragment {
    pub const ALL: [Fragment; 7] = [
        Fragment::PlannerGuidelines,
        Fragment::PlannerFailureExamples,
        Fragment::PlannerCorrectExamples,
        Fragment::GeneratorInstructions,
        Fragment::GeneratorExamples,
        Fragment::SqlGuidelines,
        Fragment::VerifierGuidelines,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            Fragment::PlannerGuidelines => "planner_guidelines.txt",
            Fragment::PlannerFailureExamples => "planner_failure_examples.txt",
            Fragment::PlannerCorrectExamples => "planner_correct_examples.txt",
            Fragment::GeneratorInstructions => "generator_instructions.txt",
            Fragment::GeneratorExamples => "generator_examples.txt",
            Fragment::SqlGuidelines => "sql_guidelines.txt",
            Fragment::VerifierGuidelines => "verifier_guidelines.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            Fragment::PlannerGuidelines => include_str!("../prompts/planner_guidelines.txt"),
            Fragment::PlannerFailureExamples => include_str!("../prompts/planner_failure_examples.txt"),
            Fragment::PlannerCorrectExamples => include_str!("../prompts/planner_correct_examples.txt"),
            Fragment::GeneratorInstructions => include_str!("../prompts/generator_instructions.txt"),
            Fragment::GeneratorExamples => include_str!("../prompts/generator_examples.txt"),
            Fragment::SqlGuidelines => include_str!("../prompts/sql_guidelines.txt"),
            Fragment::VerifierGuidelines => include_str!("../prompts/verifier_guidelines.txt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Lit(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    pieces: Vec<Piece>,
}

impl Template {
    /// Parses `text`, rejecting slots outside `allowed`.
    pub fn parse(name: &str, text: &str, allowed: &[&str]) -> Result<Self, PromptError> {
        let mut pieces = Vec::new();
        let mut lit = String::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    lit.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    lit.push('}');
                    i += 2;
                }
                b'{' => {
                    let end = text[i + 1..]
                        .find('}')
                        .ok_or(PromptError::Syntax { template: name.into(), offset: i })?;
                    let slot = &text[i + 1..i + 1 + end];
                    if slot.is_empty() || !slot.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                        return Err(PromptError::Syntax { template: name.into(), offset: i });
                    }
                    if !allowed.contains(&slot) {
                        return Err(PromptError::UnknownSlot { template: name.into(), slot: slot.into() });
                    }
                    if !lit.is_empty() {
                        pieces.push(Piece::Lit(std::mem::take(&mut lit)));
                    }
                    pieces.push(Piece::Slot(slot.into()));
                    i += end + 2;
                }
                b'}' => return Err(PromptError::Syntax { template: name.into(), offset: i }),
                _ => {
                    // copy the whole UTF-8 scalar
                    let ch = text[i..].chars().next().unwrap_or('\u{fffd}');
                    lit.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        if !lit.is_empty() {
            pieces.push(Piece::Lit(lit));
        }
        Ok(Template { name: name.into(), pieces })
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Slot(s) => Some(s.as_str()),
            Piece::Lit(_) => None,
        })
    }

    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let mut out = String::new();
        for p in &self.pieces {
            match p {
                Piece::Lit(s) => out.push_str(s),
                Piece::Slot(s) => out.push_str(values.get(s.as_str()).ok_or_else(|| PromptError::MissingSlot {
                    template: self.name.clone(),
                    slot: s.clone(),
                })?),
            }
        }
        Ok(out)
    }
}

/// Every template and fragment the agents use.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<TemplateKind, Template>,
    fragments: BTreeMap<Fragment, String>,
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self::build(|_| Ok(None)).unwrap_or_else(|e| panic!("built-in prompt is invalid: {e}"))
    }

    /// Built-ins, overridden by same-named files in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        Self::build(|name| {
            let path = dir.join(name);
            if !path.is_file() {
                return Ok(None);
            }
            std::fs::read_to_string(&path)
                .map(Some)
                .map_err(|e| PromptError::Io { path: path.display().to_string(), reason: e.to_string() })
        })
    }

    fn build(load: impl Fn(&str) -> Result<Option<String>, PromptError>) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for kind in TemplateKind::ALL {
            let text = load(kind.file_name())?.unwrap_or_else(|| kind.builtin().to_string());
            templates.insert(kind, Template::parse(kind.file_name(), &text, kind.slots())?);
        }
        let mut fragments = BTreeMap::new();
        for frag in Fragment::ALL {
            let text = load(frag.file_name())?.unwrap_or_else(|| frag.builtin().to_string());
            fragments.insert(frag, text.trim_end().to_string());
        }
        Ok(PromptSet { templates, fragments })
    }

    pub fn fragment(&self, f: Fragment) -> &str {
        &self.fragments[&f]
    }

    pub fn render(&self, kind: TemplateKind, values: &[(&str, String)]) -> Result<String, PromptError> {
        let map: BTreeMap<&str, String> = values.iter().cloned().collect();
        self.templates[&kind].render(&map)
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_use_only_declared_slots() {
        let set = PromptSet::builtin();
        for kind in TemplateKind::ALL {
            let used: Vec<&str> = set.templates[&kind].slots().collect();
            for slot in kind.slots() {
                assert!(used.contains(slot), "{kind:?} never uses {slot}");
            }
        }
    }

    #[test]
    fn escapes_and_slots() {
        let t = Template::parse("t", "{{\"a\": {x}}}", &["x"]).unwrap();
        let vals = BTreeMap::from([("x", "1".to_string())]);
        assert_eq!(t.render(&vals).unwrap(), "{\"a\": 1}");
    }

    #[test]
    fn unknown_and_missing_slots() {
        assert!(matches!(Template::parse("t", "{y}", &["x"]), Err(PromptError::UnknownSlot { .. })));
        assert!(matches!(Template::parse("t", "a } b", &[]), Err(PromptError::Syntax { .. })));
        let t = Template::parse("t", "{x}", &["x"]).unwrap();
        assert!(matches!(t.render(&BTreeMap::new()), Err(PromptError::MissingSlot { .. })));
    }

    #[test]
    fn marker_headings_present() {
        let gen = TemplateKind::Generator.builtin();
        assert!(gen.contains("Table Info:") && gen.contains("Table Names:"));
        let prop = TemplateKind::Proposer.builtin();
        assert!(!prop.contains("Table Names:"));
        for h in ["Exploratory Probes:", "Failure Probes:", "Successful Probes:", "Final SQL queries (pay more attention here):"] {
            assert!(prop.contains(h), "{h}");
        }
        assert!(TemplateKind::Planner.builtin().contains("Another way to say it:"));
    }

    #[test]
    fn directory_overrides_one_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("judge.txt"), "custom {probes}").unwrap();
        let set = PromptSet::with_overrides(dir.path()).unwrap();
        assert_eq!(set.render(TemplateKind::Judge, &[("probes", "p".into())]).unwrap(), "custom p");
        std::fs::write(dir.path().join("judge.txt"), "custom {nope}").unwrap();
        assert!(PromptSet::with_overrides(dir.path()).is_err());
    }
}
