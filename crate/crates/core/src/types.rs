//! Domain values shared by every agent: tasks, probes, SQL candidates and
//! the three-way execution feedback.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TypeError {
    #[error("field `{0}` must not be empty")]
    EmptyField(&'static str),
}

/// The agent role a model call is made on behalf of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleTag {
    Plan,
    Generate,
    Propose,
    Verify,
}

impl RoleTag {
    pub const ALL: [RoleTag; 4] = [RoleTag::Plan, RoleTag::Generate, RoleTag::Propose, RoleTag::Verify];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::Plan => "plan",
            RoleTag::Generate => "generate",
            RoleTag::Propose => "propose",
            RoleTag::Verify => "verify",
        }
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One natural-language question bound to a database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub instance_id: String,
    pub question: String,
    /// Restatement shown next to the question. Falls back to the question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paraphrase: Option<String>,
    pub db_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_knowledge: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_sql: Option<String>,
    /// Tables of the reference answer, used only when gold-schema mode is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_tables: Option<Vec<String>>,
}

impl Task {
    pub fn new(
        instance_id: impl Into<String>,
        question: impl Into<String>,
        db_id: impl Into<String>,
    ) -> Result<Self, TypeError> {
        let task = Task {
            instance_id: instance_id.into(),
            question: question.into(),
            paraphrase: None,
            db_id: db_id.into(),
            external_knowledge: None,
            gold_sql: None,
            gold_tables: None,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if self.instance_id.trim().is_empty() {
            return Err(TypeError::EmptyField("instance_id"));
        }
        if self.question.trim().is_empty() {
            return Err(TypeError::EmptyField("question"));
        }
        if self.db_id.trim().is_empty() {
            return Err(TypeError::EmptyField("db_id"));
        }
        Ok(())
    }

    pub fn paraphrase(&self) -> &str {
        match &self.paraphrase {
            Some(p) if !p.trim().is_empty() => p,
            _ => &self.question,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeStatus {
    Pending,
    Generated,
    Failed,
}

/// A self-contained natural-language test question issued by the planner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub probe_id: String,
    pub text: String,
    pub parent_task: String,
    pub status: ProbeStatus,
}

impl Probe {
    pub fn new(
        probe_id: impl Into<String>,
        text: impl Into<String>,
        parent_task: impl Into<String>,
    ) -> Result<Self, TypeError> {
        let probe = Probe {
            probe_id: probe_id.into(),
            text: text.into().trim().to_string(),
            parent_task: parent_task.into(),
            status: ProbeStatus::Pending,
        };
        if probe.probe_id.is_empty() {
            return Err(TypeError::EmptyField("probe_id"));
        }
        if probe.text.is_empty() {
            return Err(TypeError::EmptyField("text"));
        }
        Ok(probe)
    }

    pub fn with_status(mut self, status: ProbeStatus) -> Self {
        self.status = status;
        self
    }

    /// True when the text names one of `ids` as a standalone word.
    pub fn mentions_any_id<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> bool {
        let words: Vec<String> = self
            .text
            .split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '-'))
            .map(str::to_ascii_lowercase)
            .collect();
        ids.into_iter()
            .filter(|id| *id != self.probe_id)
            .any(|id| words.iter().any(|w| w.eq_ignore_ascii_case(id)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeedbackKind {
    CompilationError,
    NullError,
    Success,
}

impl fmt::Display for FeedbackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeedbackKind::CompilationError => "Compilation Error",
            FeedbackKind::NullError => "NULL Error",
            FeedbackKind::Success => "Success",
        })
    }
}

/// What happened when a statement reached the engine, before classification.
#[derive(Debug, Clone, PartialEq)]
pub enum ExecutionOutcome {
    /// Engine rejected the statement (syntax, unknown names, mutation, timeout).
    Failed(String),
    /// Statement ran; `preview` is the rendered, truncated result.
    Completed { row_count: u64, preview: String },
}

impl FeedbackKind {
    pub fn classify(outcome: &ExecutionOutcome) -> FeedbackKind {
        match outcome {
            ExecutionOutcome::Failed(_) => FeedbackKind::CompilationError,
            ExecutionOutcome::Completed { row_count: 0, .. } => FeedbackKind::NullError,
            ExecutionOutcome::Completed { .. } => FeedbackKind::Success,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionFeedback {
    pub kind: FeedbackKind,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_preview: Option<String>,
    pub row_count: u64,
    pub exec_millis: u64,
}

impl ExecutionFeedback {
    pub fn from_outcome(outcome: ExecutionOutcome, exec_millis: u64) -> Self {
        let kind = FeedbackKind::classify(&outcome);
        match outcome {
            ExecutionOutcome::Failed(message) => ExecutionFeedback {
                kind,
                message,
                result_preview: None,
                row_count: 0,
                exec_millis,
            },
            ExecutionOutcome::Completed { row_count: 0, .. } => ExecutionFeedback {
                kind,
                message: "query executed but returned no rows".to_string(),
                result_preview: None,
                row_count: 0,
                exec_millis,
            },
            ExecutionOutcome::Completed { row_count, preview } => ExecutionFeedback {
                kind,
                message: format!("query returned {row_count} row(s)"),
                result_preview: Some(preview),
                row_count,
                exec_millis,
            },
        }
    }

    pub fn compilation_error(message: impl Into<String>, exec_millis: u64) -> Self {
        Self::from_outcome(ExecutionOutcome::Failed(message.into()), exec_millis)
    }

    pub fn is_success(&self) -> bool {
        self.kind == FeedbackKind::Success
    }

    /// Checks the kind/row_count/preview coupling.
    pub fn is_consistent(&self) -> bool {
        match self.kind {
            FeedbackKind::Success => self.row_count > 0 && self.result_preview.is_some(),
            FeedbackKind::NullError => self.row_count == 0 && self.result_preview.is_none(),
            FeedbackKind::CompilationError => self.result_preview.is_none(),
        }
    }

    /// One-line-plus-preview rendering used in model-facing feedback.
    pub fn render(&self) -> String {
        match &self.result_preview {
            Some(preview) => format!("{}: {}\n{}", self.kind, self.message, preview),
            None => format!("{}: {}", self.kind, self.message),
        }
    }
}

/// One generated SQL string together with its execution feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlCandidate {
    pub sql: String,
    pub description: String,
    pub exploration: bool,
    pub probe_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<ExecutionFeedback>,
}

impl SqlCandidate {
    pub fn new(
        sql: impl Into<String>,
        description: impl Into<String>,
        exploration: bool,
        probe_id: impl Into<String>,
    ) -> Result<Self, TypeError> {
        let sql = sql.into().trim().to_string();
        if sql.is_empty() {
            return Err(TypeError::EmptyField("sql"));
        }
        Ok(SqlCandidate {
            sql,
            description: description.into(),
            exploration,
            probe_id: probe_id.into(),
            feedback: None,
        })
    }

    pub fn kind(&self) -> Option<FeedbackKind> {
        self.feedback.as_ref().map(|f| f.kind)
    }

    pub fn is_final_eligible(&self) -> bool {
        !self.exploration && self.kind() == Some(FeedbackKind::Success)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn paraphrase_defaults_to_question() {
        let mut t = Task::new("t1", "How many rows?", "db").unwrap();
        assert_eq!(t.paraphrase(), "How many rows?");
        t.paraphrase = Some("Count the rows".into());
        assert_eq!(t.paraphrase(), "Count the rows");
    }

    #[test]
    fn task_rejects_empty_fields() {
        assert_eq!(Task::new("", "q", "db"), Err(TypeError::EmptyField("instance_id")));
        assert_eq!(Task::new("t", "  ", "db"), Err(TypeError::EmptyField("question")));
    }

    #[test]
    fn probe_and_candidate_reject_empty_text() {
        assert!(Probe::new("p1", "   ", "t").is_err());
        assert!(SqlCandidate::new(" ", "d", false, "p1").is_err());
    }

    #[test]
    fn probe_id_mentions_are_detected() {
        let p = Probe::new("p2", "Combine the output of p1 with sales", "t").unwrap();
        assert!(p.mentions_any_id(["p1", "p2"]));
        let q = Probe::new("p3", "List all stores opened in 2021", "t").unwrap();
        assert!(!q.mentions_any_id(["p1", "p2", "p3"]));
    }

    #[test]
    fn feedback_rendering_includes_preview() {
        let fb = ExecutionFeedback::from_outcome(
            ExecutionOutcome::Completed { row_count: 2, preview: "a\n1\n2".into() },
            3,
        );
        assert_eq!(fb.render(), "Success: query returned 2 row(s)\na\n1\n2");
    }

    fn outcome_strategy() -> impl Strategy<Value = ExecutionOutcome> {
        prop_oneof![
            "[a-z ]{0,20}".prop_map(ExecutionOutcome::Failed),
            (0u64..50, "[a-z,\n]{0,30}")
                .prop_map(|(row_count, preview)| ExecutionOutcome::Completed { row_count, preview }),
        ]
    }

    proptest! {
        #[test]
        fn feedback_kind_is_a_function_of_outcome(outcome in outcome_strategy(), millis in 0u64..1000) {
            let fb = ExecutionFeedback::from_outcome(outcome.clone(), millis);
            prop_assert!(fb.is_consistent());
            let expected = match &outcome {
                ExecutionOutcome::Failed(_) => FeedbackKind::CompilationError,
                ExecutionOutcome::Completed { row_count, .. } if *row_count == 0 => FeedbackKind::NullError,
                ExecutionOutcome::Completed { .. } => FeedbackKind::Success,
            };
            prop_assert_eq!(fb.kind, expected);
            // same outcome, different timing: same classification
            prop_assert_eq!(ExecutionFeedback::from_outcome(outcome, millis + 7).kind, fb.kind);
        }
    }
}
