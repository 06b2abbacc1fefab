use serde::{Deserialize, Serialize};

const RUBRIC_JSON: &str = include_str!("../../assets/rubric.json");

/// One grade of the five-grade response rubric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricGrade {
    pub score: u8,
    pub criteria: Vec<String>,
}

/// Grades 4 down to 0.
pub fn rubric() -> Vec<RubricGrade> {
    serde_json::from_str(RUBRIC_JSON).expect("bundled rubric is valid JSON")
}
