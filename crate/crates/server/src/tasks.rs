//! Rating task catalogue: which responses exist and who may rate them.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use contextcrop_core::dialogue::Turn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskFileError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("task file: invalid value at `{path}`: {message}")]
    Malformed { path: String, message: String },
    #[error("task file: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorEntry {
    pub token: String,
    pub evaluator: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTask {
    pub task_id: String,
    pub session_id: String,
    pub response_index: u32,
    /// Images the rated response refers to.
    #[serde(default)]
    pub image_ids: Vec<String>,
    /// Dialogue shown to the evaluator, up to and including the rated response.
    pub excerpt: Vec<Turn>,
    pub treatment: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub evaluators: Vec<EvaluatorEntry>,
    pub tasks: Vec<RatingTask>,
}

impl TaskFile {
    pub fn parse(text: &str) -> Result<Self, TaskFileError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: TaskFile = serde_path_to_error::deserialize(de).map_err(|e| TaskFileError::Malformed {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, TaskFileError> {
        let text = std::fs::read_to_string(path).map_err(|source| TaskFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<(), TaskFileError> {
        let mut tokens = HashSet::new();
        let mut ids = HashSet::new();
        for e in &self.evaluators {
            if e.token.is_empty() {
                return Err(TaskFileError::Invalid("empty evaluator token".into()));
            }
            if !tokens.insert(e.token.as_str()) {
                return Err(TaskFileError::Invalid(format!(
                    "duplicate token for evaluator {}",
                    e.evaluator
                )));
            }
            if !ids.insert(e.evaluator) {
                return Err(TaskFileError::Invalid(format!(
                    "evaluator {} listed twice",
                    e.evaluator
                )));
            }
        }
        let mut task_ids = HashSet::new();
        let mut responses = HashSet::new();
        for t in &self.tasks {
            if !task_ids.insert(t.task_id.as_str()) {
                return Err(TaskFileError::Invalid(format!("duplicate task_id `{}`", t.task_id)));
            }
            if !responses.insert((t.session_id.as_str(), t.response_index)) {
                return Err(TaskFileError::Invalid(format!(
                    "session `{}` response {} appears in two tasks",
                    t.session_id, t.response_index
                )));
            }
        }
        Ok(())
    }

    pub fn evaluator_for(&self, token: &str) -> Option<u32> {
        self.evaluators.iter().find(|e| e.token == token).map(|e| e.evaluator)
    }

    /// Task position by (session, response), used to recognise stored ratings.
    pub fn index_by_response(&self) -> HashMap<(String, u32), usize> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(i, t)| ((t.session_id.clone(), t.response_index), i))
            .collect()
    }
}
