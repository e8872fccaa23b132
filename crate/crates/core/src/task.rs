//! Tasks and their optional regex objective checks.

use std::collections::HashSet;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum Category {
    Qa,
    Reasoning,
    Creative,
    Code,
    #[default]
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Qa,
        Category::Reasoning,
        Category::Creative,
        Category::Code,
        Category::Other,
    ];

    pub fn index(self) -> usize {
        Category::ALL
            .iter()
            .position(|c| *c == self)
            .expect("listed")
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Qa => "qa",
            Category::Reasoning => "reasoning",
            Category::Creative => "creative",
            Category::Code => "code",
            Category::Other => "other",
        }
    }
}

/// A regular expression whose match in the candidate earns `weight`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveCheck {
    pub pattern: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub prompt: String,
    #[serde(default)]
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty_tier: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective_checks: Option<Vec<ObjectiveCheck>>,
}

impl Task {
    pub fn new(id: impl Into<String>, prompt: impl Into<String>, category: Category) -> Self {
        Self {
            id: id.into(),
            prompt: prompt.into(),
            category,
            difficulty_tier: None,
            reference: None,
            objective_checks: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::validation("task id must be non-empty"));
        }
        if self.prompt.trim().is_empty() {
            return Err(Error::validation(format!(
                "task {} has an empty prompt",
                self.id
            )));
        }
        if let Some(checks) = &self.objective_checks {
            for c in checks {
                if !(c.weight > 0.0 && c.weight.is_finite()) {
                    return Err(Error::validation(format!(
                        "task {}: objective check weights must be positive",
                        self.id
                    )));
                }
                Regex::new(&c.pattern).map_err(|e| {
                    Error::validation(format!(
                        "task {}: bad pattern {:?}: {e}",
                        self.id, c.pattern
                    ))
                })?;
            }
        }
        Ok(())
    }

    /// Weighted fraction of objective checks whose pattern matches, or
    /// `None` when the task has no checks.
    pub fn objective_score(&self, candidate: &str) -> Result<Option<f64>> {
        let checks = match &self.objective_checks {
            Some(c) if !c.is_empty() => c,
            _ => return Ok(None),
        };
        let mut total = 0.0;
        let mut passed = 0.0;
        for c in checks {
            let re = Regex::new(&c.pattern)
                .map_err(|e| Error::validation(format!("bad pattern {:?}: {e}", c.pattern)))?;
            total += c.weight;
            if re.is_match(candidate) {
                passed += c.weight;
            }
        }
        Ok(Some((passed / total).clamp(0.0, 1.0)))
    }
}

pub fn validate_tasks(tasks: &[Task]) -> Result<()> {
    let mut seen = HashSet::new();
    for t in tasks {
        t.validate()?;
        if !seen.insert(t.id.as_str()) {
            return Err(Error::validation(format!("duplicate task id {}", t.id)));
        }
    }
    Ok(())
}

/// Loads a JSON array of tasks, or JSON lines when the array parse fails.
pub fn load_tasks(path: &Path) -> Result<Vec<Task>> {
    let text = std::fs::read_to_string(path)?;
    let tasks: Vec<Task> = match serde_json::from_str(&text) {
        Ok(t) => t,
        Err(_) => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?,
    };
    validate_tasks(&tasks)?;
    Ok(tasks)
}
