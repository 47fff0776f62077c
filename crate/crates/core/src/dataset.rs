//! JSON-lines task datasets.

use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

use crate::types::{Task, TypeError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Invalid { line: usize, source: TypeError },
    #[error("line {line}: duplicate instance_id `{id}`")]
    Duplicate { line: usize, id: String },
}

pub fn parse_tasks(text: &str) -> Result<Vec<Task>, DatasetError> {
    let mut seen = HashSet::new();
    let mut tasks = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let task: Task =
            serde_json::from_str(raw).map_err(|e| DatasetError::Parse { line, message: e.to_string() })?;
        task.validate().map_err(|source| DatasetError::Invalid { line, source })?;
        if !seen.insert(task.instance_id.clone()) {
            return Err(DatasetError::Duplicate { line, id: task.instance_id });
        }
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn load_tasks(path: &Path) -> Result<Vec<Task>, DatasetError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    parse_tasks(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_optional_keys() {
        let text = r#"{"instance_id":"a","question":"q1","db_id":"shop"}

{"instance_id":"b","question":"q2","db_id":"shop","external_knowledge":"fiscal year starts in April","gold_sql":"SELECT 1"}
"#;
        let tasks = parse_tasks(text).unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[1].external_knowledge.as_deref(), Some("fiscal year starts in April"));
        assert_eq!(tasks[0].paraphrase(), "q1");
    }

    #[test]
    fn rejects_duplicates_and_empty_questions() {
        let dup = "{\"instance_id\":\"a\",\"question\":\"q\",\"db_id\":\"d\"}\n{\"instance_id\":\"a\",\"question\":\"r\",\"db_id\":\"d\"}";
        assert!(matches!(parse_tasks(dup), Err(DatasetError::Duplicate { line: 2, .. })));
        let empty = "{\"instance_id\":\"a\",\"question\":\"\",\"db_id\":\"d\"}";
        assert!(matches!(parse_tasks(empty), Err(DatasetError::Invalid { line: 1, .. })));
        assert!(matches!(parse_tasks("{"), Err(DatasetError::Parse { line: 1, .. })));
    }
}
