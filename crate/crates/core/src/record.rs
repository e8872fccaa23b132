//! Run records and the per-run execution context.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::channel::{AgentOutput, CallRole, ChannelRef, GenerateRequest, Nonce};
use crate::error::Result;
use crate::scoring::{Judged, Scorer};
use crate::seed::{fnv1a, mix};
use crate::task::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// A judge reply stayed incomplete after the re-ask.
    Degraded,
    /// Some branch or sample failed and was skipped.
    BranchFailed,
    /// Synthesis skipped because one branch dominated.
    FastPath,
    /// The synthesizer echoed the best branch verbatim.
    IdentityEcho,
    /// The combined or refined output lost to the best individual.
    GuardReverted,
    SynthesisFailed,
    VoterFallback,
    CriticFailed,
    ParityFailed,
    DecoderFailed,
    /// Stopped before the round budget because the threshold was met.
    EarlyStop,
    Plateau,
    Diverged,
    /// Pilot probe fell back to self-rating.
    ProbeFallback,
    /// Difficulty could not be estimated; maximum protection assumed.
    MaxProtection,
    /// The technique failed outright; the record carries the error.
    Failed,
}

/// One technique execution on one task and repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_id: String,
    pub technique: String,
    pub repeat_index: u32,
    pub individual_outputs: Vec<AgentOutput>,
    /// Score of each individual output, when it was scored.
    pub individual_scores: Vec<Option<f64>>,
    pub overhead_outputs: Vec<AgentOutput>,
    pub judge_outputs: Vec<AgentOutput>,
    pub combined_text: String,
    pub final_quality: f64,
    pub rounds: u32,
    pub total_cost: f64,
    #[serde(default)]
    pub score_history: Vec<f64>,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn best_individual_score(&self) -> Option<f64> {
        self.individual_scores
            .iter()
            .flatten()
            .copied()
            .fold(None, |m, x| Some(m.map_or(x, |m: f64| m.max(x))))
    }

    pub fn recomputed_cost(&self) -> f64 {
        self.individual_outputs
            .iter()
            .chain(&self.overhead_outputs)
            .chain(&self.judge_outputs)
            .map(|o| o.cost_usd)
            .sum()
    }

    pub fn has(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }

    /// A record for a run that failed before producing an answer.
    pub fn failed(ctx: &RunContext<'_>, technique: &str, error: String) -> Self {
        let mut flags = BTreeSet::new();
        flags.insert(Flag::Failed);
        Self {
            task_id: ctx.task.id.clone(),
            technique: technique.to_string(),
            repeat_index: ctx.repeat_index,
            individual_outputs: Vec::new(),
            individual_scores: Vec::new(),
            overhead_outputs: Vec::new(),
            judge_outputs: Vec::new(),
            combined_text: String::new(),
            final_quality: 0.0,
            rounds: 0,
            total_cost: 0.0,
            score_history: Vec::new(),
            flags,
            difficulty: None,
            profile: None,
            error: Some(error),
        }
    }
}

/// Everything a technique needs besides its channels.
pub struct RunContext<'a> {
    pub task: &'a Task,
    pub scorer: &'a Scorer,
    pub repeat_index: u32,
    pub stream: u64,
    counter: AtomicU64,
}

impl<'a> RunContext<'a> {
    /// The stream depends on the experiment seed, task and repeat but not on
    /// the technique, so techniques see common random numbers.
    pub fn new(task: &'a Task, scorer: &'a Scorer, seed: u64, repeat_index: u32) -> Self {
        Self {
            task,
            scorer,
            repeat_index,
            stream: mix(&[seed, fnv1a(&task.id), u64::from(repeat_index)]),
            counter: AtomicU64::new(0),
        }
    }

    pub fn nonce(&self) -> Nonce {
        Nonce::new(self.stream, self.counter.fetch_add(1, Ordering::Relaxed))
    }

    /// Reserves `n` consecutive call indices, for deterministic fan-out.
    pub fn reserve(&self, n: usize) -> u64 {
        self.counter.fetch_add(n as u64, Ordering::Relaxed)
    }

    pub fn call(
        &self,
        channel: &ChannelRef,
        prompt: impl Into<String>,
        role: CallRole,
        temperature: Option<f64>,
        nonce: Nonce,
    ) -> Result<AgentOutput> {
        let mut req = GenerateRequest::new(prompt, role, nonce);
        req.temperature = temperature;
        channel.generate(&req)
    }

    pub fn score(&self, candidate: &str, nonce: Nonce) -> Result<Judged> {
        self.scorer.score(self.task, candidate, nonce)
    }

    pub fn differential(
        &self,
        candidate: &str,
        baseline: &str,
        baseline_score: f64,
        nonce: Nonce,
    ) -> Result<Judged> {
        self.scorer
            .differential_score(self.task, candidate, baseline, baseline_score, nonce)
    }
}

/// Accumulates the outputs of one run.
#[derive(Debug, Default)]
pub struct Trace {
    individual: Vec<AgentOutput>,
    scores: Vec<Option<f64>>,
    overhead: Vec<AgentOutput>,
    judge: Vec<AgentOutput>,
    pub flags: BTreeSet<Flag>,
    pub history: Vec<f64>,
    pub difficulty: Option<f64>,
    pub profile: Option<String>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn individual(&mut self, out: AgentOutput, score: Option<f64>) -> usize {
        self.individual.push(out);
        self.scores.push(score);
        self.individual.len() - 1
    }

    pub fn set_score(&mut self, index: usize, score: f64) {
        self.scores[index] = Some(score);
    }

    pub fn overhead(&mut self, out: AgentOutput) {
        self.overhead.push(out);
    }

    /// Records the judge calls and returns the score value.
    pub fn judged(&mut self, judged: Judged) -> f64 {
        if judged.degraded {
            self.flags.insert(Flag::Degraded);
        }
        self.judge.extend(judged.outputs);
        judged.score.value
    }

    pub fn flag(&mut self, flag: Flag) {
        self.flags.insert(flag);
    }

    pub fn individual_text(&self, index: usize) -> &str {
        &self.individual[index].text
    }

    pub fn individual_len(&self) -> usize {
        self.individual.len()
    }

    /// Appends everything recorded by a nested run.
    pub fn absorb(&mut self, record: RunRecord) {
        self.individual.extend(record.individual_outputs);
        self.scores.extend(record.individual_scores);
        self.overhead.extend(record.overhead_outputs);
        self.judge.extend(record.judge_outputs);
        self.flags.extend(record.flags);
        self.history.extend(record.score_history);
    }

    pub fn finish(
        self,
        ctx: &RunContext<'_>,
        technique: &str,
        combined_text: String,
        final_quality: f64,
        rounds: u32,
    ) -> RunRecord {
        let total_cost = self
            .individual
            .iter()
            .chain(&self.overhead)
            .chain(&self.judge)
            .map(|o| o.cost_usd)
            .sum();
        RunRecord {
            task_id: ctx.task.id.clone(),
            technique: technique.to_string(),
            repeat_index: ctx.repeat_index,
            individual_outputs: self.individual,
            individual_scores: self.scores,
            overhead_outputs: self.overhead,
            judge_outputs: self.judge,
            combined_text,
            final_quality: final_quality.clamp(0.0, 1.0),
            rounds,
            total_cost,
            score_history: self.history,
            flags: self.flags,
            difficulty: self.difficulty,
            profile: self.profile,
            error: None,
        }
    }
}
