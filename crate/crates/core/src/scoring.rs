//! The quality estimator: a weighted binary-checklist judge, the blended
//! objective/judge score, and differential scoring.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::channel::{AgentOutput, CallRole, ChannelRef, GenerateRequest, Nonce};
use crate::error::{Error, Result};
use crate::prompts::{self, render};
use crate::task::Task;

pub const CHECKLIST_LEN: usize = 15;
pub const OBJECTIVE_WEIGHT: f64 = 0.6;
pub const JUDGE_WEIGHT: f64 = 0.4;
const JUDGE_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistCriterion {
    pub id: String,
    pub question: String,
    pub weight: f64,
}

fn validate_checklist(name: &str, criteria: &[ChecklistCriterion]) -> Result<()> {
    if criteria.len() != CHECKLIST_LEN {
        return Err(Error::validation(format!(
            "{name} checklist has {} criteria, expected {CHECKLIST_LEN}",
            criteria.len()
        )));
    }
    if criteria.iter().any(|c| !(c.weight > 0.0)) {
        return Err(Error::validation(format!(
            "{name} checklist weights must be positive"
        )));
    }
    let total: f64 = criteria.iter().map(|c| c.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "{name} checklist weights sum to {total}"
        )));
    }
    let mut ids: Vec<String> = criteria.iter().map(|c| c.id.to_lowercase()).collect();
    ids.sort();
    ids.dedup();
    if ids.len() != criteria.len() {
        return Err(Error::validation(format!(
            "{name} checklist has duplicate ids"
        )));
    }
    Ok(())
}

/// The with-reference and without-reference criterion sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistSet {
    pub with_reference: Vec<ChecklistCriterion>,
    pub without_reference: Vec<ChecklistCriterion>,
}

impl Default for ChecklistSet {
    fn default() -> Self {
        serde_json::from_str(include_str!("../data/checklists.json"))
            .expect("bundled checklists parse")
    }
}

impl ChecklistSet {
    pub fn load(path: &Path) -> Result<Self> {
        let set: ChecklistSet = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        validate_checklist("with_reference", &self.with_reference)?;
        validate_checklist("without_reference", &self.without_reference)
    }

    pub fn for_task(&self, has_reference: bool) -> &[ChecklistCriterion] {
        if has_reference {
            &self.with_reference
        } else {
            &self.without_reference
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Checklist,
    Blended,
    Differential,
    SyntheticOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub value: f64,
    pub kind: ScoreKind,
    /// `(objective, judge)` for blended scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<(f64, f64)>,
}

impl QualityScore {
    pub fn new(value: f64, kind: ScoreKind) -> Self {
        Self {
            value: value.clamp(0.0, 1.0),
            kind,
            components: None,
        }
    }
}

/// `sum weight_i [answer_i = yes]`.
pub fn checklist_value(criteria: &[ChecklistCriterion], answers: &[bool]) -> f64 {
    criteria
        .iter()
        .zip(answers)
        .filter(|(_, yes)| **yes)
        .map(|(c, _)| c.weight)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// `0.6 objective + 0.4 judge`.
pub fn blended_score(objective: f64, judge: f64) -> Result<QualityScore> {
    if !(0.0..=1.0).contains(&objective) || !(0.0..=1.0).contains(&judge) {
        return Err(Error::validation("blended_score inputs must lie in [0, 1]"));
    }
    Ok(QualityScore {
        value: (OBJECTIVE_WEIGHT * objective + JUDGE_WEIGHT * judge).clamp(0.0, 1.0),
        kind: ScoreKind::Blended,
        components: Some((objective, judge)),
    })
}

/// `clamp(baseline_score + candidate - baseline_rescore, 0, 1)`.
pub fn differential_value(baseline_score: f64, candidate: f64, baseline_rescore: f64) -> f64 {
    (baseline_score + (candidate - baseline_rescore)).clamp(0.0, 1.0)
}

fn reply_line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^\s*(?:[-*•]\s*)?(?:\(?\d+[.)]\s+)?[`*_]*([a-z0-9_\-]+)[`*_]*\s*[:=\-]+\s*[`*_]*(yes|no|y|n|true|false)\b",
        )
        .unwrap()
    })
}

/// Parses `id: yes|no` lines into one optional answer per criterion.
/// Numeric ids `1..=n` address criteria by position when no criterion has
/// that literal id.
pub fn parse_checklist_reply(reply: &str, criteria: &[ChecklistCriterion]) -> Vec<Option<bool>> {
    let index: HashMap<String, usize> = criteria
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id.to_lowercase(), i))
        .collect();
    let mut answers = vec![None; criteria.len()];
    for line in reply.lines() {
        let Some(caps) = reply_line_regex().captures(line) else {
            continue;
        };
        let id = caps[1].to_lowercase();
        let slot = index.get(&id).copied().or_else(|| {
            id.parse::<usize>()
                .ok()
                .filter(|n| (1..=criteria.len()).contains(n))
                .map(|n| n - 1)
        });
        if let Some(i) = slot {
            if answers[i].is_none() {
                let v = caps[2].to_lowercase();
                answers[i] = Some(matches!(v.as_str(), "yes" | "y" | "true"));
            }
        }
    }
    answers
}

fn parse_oracle_reply(reply: &str) -> Option<f64> {
    let rest = reply.trim().strip_prefix("SCORE=")?;
    rest.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// A score together with the judge calls that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Judged {
    pub score: QualityScore,
    pub outputs: Vec<AgentOutput>,
    pub degraded: bool,
}

impl Judged {
    pub fn value(&self) -> f64 {
        self.score.value
    }
}

/// Scores candidates with a judge channel.
#[derive(Clone)]
pub struct Scorer {
    judge: ChannelRef,
    checklists: ChecklistSet,
}

impl std::fmt::Debug for Scorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scorer")
            .field("judge", &self.judge.config().display_name())
            .finish()
    }
}

impl Scorer {
    pub fn new(judge: ChannelRef, checklists: ChecklistSet) -> Result<Self> {
        checklists.validate()?;
        Ok(Self { judge, checklists })
    }

    pub fn judge(&self) -> &ChannelRef {
        &self.judge
    }

    fn ask(
        &self,
        template: &str,
        task: &Task,
        candidate: &str,
        criteria: &[&ChecklistCriterion],
        nonce: Nonce,
    ) -> Result<AgentOutput> {
        let listing: Vec<String> = criteria
            .iter()
            .map(|c| format!("{}: {}", c.id, c.question))
            .collect();
        let prompt = render(
            template,
            &[
                ("task", &task.prompt),
                (
                    "reference_block",
                    &prompts::reference_block(task.reference.as_deref()),
                ),
                ("criteria", &listing.join("\n")),
                ("candidate", candidate),
            ],
        );
        self.judge.generate(
            &GenerateRequest::new(prompt, CallRole::Judge, nonce).temperature(JUDGE_TEMPERATURE),
        )
    }

    /// Checklist (or oracle) judge score of `candidate`, without blending.
    pub fn checklist_score(&self, task: &Task, candidate: &str, nonce: Nonce) -> Result<Judged> {
        if candidate.trim().is_empty() {
            return Err(Error::validation("candidate must be non-empty"));
        }
        let criteria = self.checklists.for_task(task.reference.is_some());
        let all: Vec<&ChecklistCriterion> = criteria.iter().collect();
        let first = self.ask(prompts::JUDGE_CHECKLIST, task, candidate, &all, nonce)?;
        if let Some(v) = parse_oracle_reply(&first.text) {
            return Ok(Judged {
                score: QualityScore::new(v, ScoreKind::SyntheticOracle),
                outputs: vec![first],
                degraded: false,
            });
        }
        let mut answers = parse_checklist_reply(&first.text, criteria);
        let mut outputs = vec![first];
        let mut degraded = false;
        if answers.iter().any(Option::is_none) {
            let missing: Vec<&ChecklistCriterion> = criteria
                .iter()
                .zip(&answers)
                .filter(|(_, a)| a.is_none())
                .map(|(c, _)| c)
                .collect();
            match self.ask(prompts::JUDGE_REASK, task, candidate, &missing, nonce) {
                Ok(second) => {
                    let again = parse_checklist_reply(&second.text, criteria);
                    for (a, b) in answers.iter_mut().zip(again) {
                        if a.is_none() {
                            *a = b;
                        }
                    }
                    outputs.push(second);
                }
                Err(e) => log::warn!("judge re-ask failed: {e}"),
            }
            degraded = answers.iter().any(Option::is_none);
        }
        let yes: Vec<bool> = answers.iter().map(|a| a.unwrap_or(false)).collect();
        Ok(Judged {
            score: QualityScore::new(checklist_value(criteria, &yes), ScoreKind::Checklist),
            outputs,
            degraded,
        })
    }

    /// Full score: blended when the task has objective checks, otherwise
    /// the checklist score.
    pub fn score(&self, task: &Task, candidate: &str, nonce: Nonce) -> Result<Judged> {
        let judged = self.checklist_score(task, candidate, nonce)?;
        match task.objective_score(candidate)? {
            Some(objective) => Ok(Judged {
                score: blended_score(objective, judged.score.value)?,
                ..judged
            }),
            None => Ok(judged),
        }
    }

    /// Scores `candidate` relative to `baseline`, whose known score is
    /// `baseline_score`, cancelling judge bias common to both.
    pub fn differential_score(
        &self,
        task: &Task,
        candidate: &str,
        baseline: &str,
        baseline_score: f64,
        nonce: Nonce,
    ) -> Result<Judged> {
        if !(0.0..=1.0).contains(&baseline_score) {
            return Err(Error::validation("baseline_score must lie in [0, 1]"));
        }
        if candidate == baseline {
            return Ok(Judged {
                score: QualityScore::new(baseline_score, ScoreKind::Differential),
                outputs: Vec::new(),
                degraded: false,
            });
        }
        let cand = self.score(task, candidate, nonce)?;
        let base = self.score(task, baseline, nonce)?;
        let mut outputs = cand.outputs;
        outputs.extend(base.outputs);
        Ok(Judged {
            score: QualityScore::new(
                differential_value(baseline_score, cand.score.value, base.score.value),
                ScoreKind::Differential,
            ),
            outputs,
            degraded: cand.degraded || base.degraded,
        })
    }
}
