//! Iterative decoders: chase combining, incremental redundancy driven by
//! structured critique, and turbo refinement with lens rotation, extrinsic
//! scaling and adaptive damping. All deliver the best iterate seen.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::channel::{CallRole, ChannelRef};
use crate::error::{Error, Result};
use crate::parse::extract_json_array;
use crate::prompts::{self, render};
use crate::record::{Flag, RunContext, RunRecord, Trace};

pub const CRITIC_TEMPERATURE: f64 = 0.2;
pub const CHASE_TEMPERATURE: f64 = 0.3;
pub const EARLY_EXIT_FRACTION: f64 = 0.9;
pub const PLATEAU_WINDOW: usize = 2;
pub const PLATEAU_SPREAD: f64 = 0.015;
pub const ALPHA_FLOOR: f64 = 0.1;
pub const ALPHA_RELAX: f64 = 1.2;
pub const ALPHA_DAMP: f64 = 0.5;
pub const DIVERGENCE_REGRESSIONS: u32 = 2;
pub const LENSES: [&str; 4] = ["correctness", "completeness", "reasoning", "clarity"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueType {
    FactualError,
    MissingContent,
    ReasoningGap,
    Unclear,
}

/// Ordered `Minor < Major < Critical`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Minor,
    Major,
    Critical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueIssue {
    pub quote: String,
    pub issue_type: IssueType,
    pub fix: String,
    pub severity: Severity,
}

impl CritiqueIssue {
    pub fn unstructured(text: &str) -> Self {
        Self {
            quote: String::new(),
            issue_type: IssueType::Unclear,
            fix: text.trim().to_string(),
            severity: Severity::Major,
        }
    }

    pub fn is_structured(&self) -> bool {
        !self.quote.trim().is_empty()
    }
}

fn parse_issue_type(s: &str) -> IssueType {
    match s.trim().to_lowercase().replace([' ', '-'], "_").as_str() {
        "factual_error" | "factual" | "error" => IssueType::FactualError,
        "missing_content" | "missing" => IssueType::MissingContent,
        "reasoning_gap" | "reasoning" => IssueType::ReasoningGap,
        _ => IssueType::Unclear,
    }
}

fn parse_severity(s: &str) -> Severity {
    match s.trim().to_lowercase().as_str() {
        "critical" | "high" => Severity::Critical,
        "minor" | "low" => Severity::Minor,
        _ => Severity::Major,
    }
}

fn field<'a>(v: &'a Value, names: &[&str]) -> Option<&'a str> {
    names.iter().find_map(|n| v.get(*n).and_then(Value::as_str))
}

fn issue_from_value(v: &Value) -> Option<CritiqueIssue> {
    match v {
        Value::Object(_) => Some(CritiqueIssue {
            quote: field(v, &["quote", "text"])
                .unwrap_or("")
                .trim()
                .to_string(),
            issue_type: parse_issue_type(field(v, &["type", "issue_type"]).unwrap_or("")),
            fix: field(v, &["correction", "fix", "detail", "suggestion"])
                .unwrap_or("")
                .trim()
                .to_string(),
            severity: parse_severity(field(v, &["severity"]).unwrap_or("")),
        }),
        Value::String(s) if !s.trim().is_empty() => Some(CritiqueIssue::unstructured(s)),
        _ => None,
    }
}

/// Parses a critic reply. `[]` and `PASS` mean no issues; anything that
/// does not parse becomes one unstructured issue carrying the raw text.
pub fn parse_critique(reply: &str) -> Vec<CritiqueIssue> {
    let trimmed = reply.trim();
    if trimmed.is_empty() || trimmed == "[]" || trimmed.to_uppercase().starts_with("PASS") {
        return Vec::new();
    }
    match extract_json_array(trimmed) {
        Some(items) => items.iter().filter_map(issue_from_value).collect(),
        None => vec![CritiqueIssue::unstructured(trimmed)],
    }
}

pub fn normalize_quote(quote: &str) -> String {
    quote.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Drops structured issues whose quote was already addressed.
pub fn dedup_issues(issues: Vec<CritiqueIssue>, applied: &HashSet<String>) -> Vec<CritiqueIssue> {
    issues
        .into_iter()
        .filter(|i| !i.is_structured() || !applied.contains(&normalize_quote(&i.quote)))
        .collect()
}

/// Severity floor, then `ceil(n alpha)` most-severe-first (at least one
/// when any survive), then the hard cap.
pub fn extrinsic_scale(
    issues: &[CritiqueIssue],
    severity_floor: Severity,
    alpha: f64,
    max_corrections: usize,
) -> Vec<CritiqueIssue> {
    let mut kept: Vec<CritiqueIssue> = issues
        .iter()
        .filter(|i| i.severity >= severity_floor)
        .cloned()
        .collect();
    if kept.is_empty() {
        return kept;
    }
    kept.sort_by(|a, b| b.severity.cmp(&a.severity));
    let keep = ((kept.len() as f64 * alpha - 1e-9).ceil() as usize).max(1);
    kept.truncate(keep.min(max_corrections));
    kept
}

/// Spread of the last `window` history values is below `spread`.
pub fn plateaued(history: &[f64], window: usize, spread: f64) -> bool {
    if window == 0 || history.len() < window {
        return false;
    }
    let tail = &history[history.len() - window..];
    let max = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = tail.iter().copied().fold(f64::INFINITY, f64::min);
    max - min < spread
}

/// The `Y*`, `q*`, history, applied corrections, damping and regression
/// counter of an iterative decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationState {
    pub best_text: String,
    pub best_score: f64,
    pub score_history: Vec<f64>,
    pub applied_corrections: HashSet<String>,
    pub alpha: f64,
    pub consecutive_regressions: u32,
}

impl IterationState {
    pub fn new(text: String, score: f64, alpha: f64) -> Self {
        Self {
            best_text: text,
            best_score: score,
            score_history: vec![score],
            applied_corrections: HashSet::new(),
            alpha,
            consecutive_regressions: 0,
        }
    }

    /// Accepts iff `score >= best`. Returns whether it was accepted.
    pub fn offer(&mut self, text: String, score: f64, corrections: &[CritiqueIssue]) -> bool {
        self.score_history.push(score);
        if score >= self.best_score {
            self.best_text = text;
            self.best_score = score;
            self.applied_corrections.extend(
                corrections
                    .iter()
                    .filter(|c| c.is_structured())
                    .map(|c| normalize_quote(&c.quote)),
            );
            true
        } else {
            false
        }
    }

    pub fn relax(&mut self, alpha0: f64) {
        self.alpha = alpha0.min(ALPHA_RELAX * self.alpha);
        self.consecutive_regressions = 0;
    }

    pub fn damp(&mut self) {
        self.alpha = ALPHA_FLOOR.max(ALPHA_DAMP * self.alpha);
        self.consecutive_regressions += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarqCcParams {
    pub max_rounds: usize,
    pub tau: f64,
}

impl Default for HarqCcParams {
    fn default() -> Self {
        Self {
            max_rounds: 5,
            tau: 0.85,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarqIrParams {
    pub max_rounds: usize,
    pub tau: f64,
    pub early_exit: bool,
}

impl Default for HarqIrParams {
    fn default() -> Self {
        Self {
            max_rounds: 5,
            tau: 0.85,
            early_exit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TurboParams {
    /// Refinement iterations after iteration 0.
    pub max_iterations: usize,
    pub tau: f64,
    pub alpha0: f64,
    pub severity_floor: Severity,
    pub max_corrections: usize,
    pub early_exit: bool,
}

impl Default for TurboParams {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            tau: 0.9,
            alpha0: 0.5,
            severity_floor: Severity::Major,
            max_corrections: 2,
            early_exit: false,
        }
    }
}

fn initial_attempt(
    generator: &ChannelRef,
    ctx: &RunContext<'_>,
    trace: &mut Trace,
) -> Result<(String, f64)> {
    let out = ctx.call(
        generator,
        ctx.task.prompt.clone(),
        CallRole::Generate,
        None,
        ctx.nonce(),
    )?;
    let q = trace.judged(ctx.score(&out.text, ctx.nonce())?);
    let text = out.text.clone();
    trace.individual(out, Some(q));
    Ok((text, q))
}

/// Up to `max_rounds` identical transmissions; early stop at `tau`,
/// otherwise chase synthesis over all attempts behind the guard.
pub fn run_harq_cc(
    generator: &ChannelRef,
    synthesizer: &ChannelRef,
    params: &HarqCcParams,
    ctx: &RunContext<'_>,
) -> Result<RunRecord> {
    if params.max_rounds == 0 {
        return Err(Error::validation("HARQ-CC needs max_rounds >= 1"));
    }
    let mut trace = Trace::new();
    let mut attempts: Vec<(String, f64)> = Vec::new();
    for k in 1..=params.max_rounds {
        let attempt = ctx
            .call(
                generator,
                ctx.task.prompt.clone(),
                CallRole::Generate,
                None,
                ctx.nonce(),
            )
            .and_then(|out| {
                let j = ctx.score(&out.text, ctx.nonce())?;
                Ok((out, j))
            });
        let (out, judged) = match attempt {
            Ok(x) => x,
            Err(e) if k >= 2 => {
                log::warn!("HARQ-CC round {k} failed on {}: {e}", ctx.task.id);
                trace.flag(Flag::BranchFailed);
                break;
            }
            Err(e) => return Err(e),
        };
        let q = trace.judged(judged);
        trace.history.push(q);
        attempts.push((out.text.clone(), q));
        trace.individual(out, Some(q));
        if q >= params.tau {
            trace.flag(Flag::EarlyStop);
            let text = attempts.last().expect("pushed").0.clone();
            return Ok(trace.finish(ctx, "harq_cc", text, q, k as u32));
        }
    }
    let rounds = attempts.len() as u32;
    let scores: Vec<f64> = attempts.iter().map(|a| a.1).collect();
    let best = crate::diversity::argmax(&scores).expect("at least one attempt");
    let (best_text, best_score) = attempts[best].clone();
    if attempts.len() < 2 {
        return Ok(trace.finish(ctx, "harq_cc", best_text, best_score, rounds));
    }
    let listing: Vec<String> = attempts
        .iter()
        .enumerate()
        .map(|(i, (t, q))| format!("[ATTEMPT {}] (quality score: {q:.3})\n{t}\n", i + 1))
        .collect();
    let prompt = render(
        prompts::CHASE_SYNTHESIS,
        &[
            ("task", &ctx.task.prompt),
            ("attempts", &listing.join("\n")),
        ],
    );
    let (text, q) = match ctx.call(
        synthesizer,
        prompt,
        CallRole::Synthesize,
        Some(CHASE_TEMPERATURE),
        ctx.nonce(),
    ) {
        Ok(out) => {
            let text = out.text.clone();
            trace.overhead(out);
            if text.trim() == best_text.trim() {
                trace.flag(Flag::IdentityEcho);
                (best_text.clone(), best_score)
            } else {
                match ctx.differential(&text, &best_text, best_score, ctx.nonce()) {
                    Ok(j) => {
                        let q = trace.judged(j);
                        trace.history.push(q);
                        if q > best_score {
                            (text, q)
                        } else {
                            trace.flag(Flag::GuardReverted);
                            (best_text.clone(), best_score)
                        }
                    }
                    Err(e) => {
                        log::warn!("chase rescore failed on {}: {e}", ctx.task.id);
                        trace.flag(Flag::SynthesisFailed);
                        (best_text.clone(), best_score)
                    }
                }
            }
        }
        Err(e) => {
            log::warn!("chase synthesis failed on {}: {e}", ctx.task.id);
            trace.flag(Flag::SynthesisFailed);
            (best_text.clone(), best_score)
        }
    };
    Ok(trace.finish(ctx, "harq_cc", text, q, rounds))
}

fn critique(
    critic: &ChannelRef,
    state: &IterationState,
    lens: Option<&str>,
    ctx: &RunContext<'_>,
    trace: &mut Trace,
) -> Vec<CritiqueIssue> {
    let mut addressed: Vec<&String> = state.applied_corrections.iter().collect();
    addressed.sort();
    let addressed = if addressed.is_empty() {
        "(none)".to_string()
    } else {
        addressed
            .iter()
            .map(|q| format!("- {q}"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let lens = lens
        .map(|l| format!("\nPay special attention to {l} this round, but flag any problem.\n"))
        .unwrap_or_default();
    let score = format!("{:.3}", state.best_score);
    let prompt = render(
        prompts::CRITIC,
        &[
            ("score", &score),
            ("lens", &lens),
            ("task", &ctx.task.prompt),
            (
                "reference_block",
                &prompts::reference_block(ctx.task.reference.as_deref()),
            ),
            ("addressed", &addressed),
            ("answer", &state.best_text),
        ],
    );
    match ctx.call(
        critic,
        prompt,
        CallRole::Critique,
        Some(CRITIC_TEMPERATURE),
        ctx.nonce(),
    ) {
        Ok(out) => {
            let issues = parse_critique(&out.text);
            trace.overhead(out);
            dedup_issues(issues, &state.applied_corrections)
        }
        Err(e) => {
            log::warn!("critic failed on {}: {e}", ctx.task.id);
            trace.flag(Flag::CriticFailed);
            Vec::new()
        }
    }
}

fn refinement_prompt(ctx: &RunContext<'_>, answer: &str, issues: &[CritiqueIssue]) -> String {
    if issues.iter().any(CritiqueIssue::is_structured) {
        let corrections: Vec<String> = issues
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let quote = if c.quote.is_empty() {
                    "(general)"
                } else {
                    c.quote.as_str()
                };
                format!(
                    "{}. [{:?}, {:?}] In \"{quote}\": {}",
                    i + 1,
                    c.severity,
                    c.issue_type,
                    c.fix
                )
            })
            .collect();
        render(
            prompts::CORRECTION_LIST,
            &[
                ("task", &ctx.task.prompt),
                ("answer", answer),
                ("corrections", &corrections.join("\n")),
            ],
        )
    } else {
        let feedback = if issues.is_empty() {
            "The reviewer reported no specific issues. Improve correctness and completeness where possible.".to_string()
        } else {
            issues
                .iter()
                .map(|i| i.fix.clone())
                .collect::<Vec<_>>()
                .join("\n")
        };
        render(
            prompts::REWRITE,
            &[
                ("task", &ctx.task.prompt),
                ("answer", answer),
                ("feedback", &feedback),
            ],
        )
    }
}

/// Generates a refinement and scores it against the current best.
fn refine(
    generator: &ChannelRef,
    prompt: String,
    state: &IterationState,
    ctx: &RunContext<'_>,
    trace: &mut Trace,
) -> Option<(String, f64)> {
    let out = match ctx.call(generator, prompt, CallRole::Refine, None, ctx.nonce()) {
        Ok(out) => out,
        Err(e) => {
            log::warn!("refinement failed on {}: {e}", ctx.task.id);
            trace.flag(Flag::BranchFailed);
            return None;
        }
    };
    match ctx.differential(&out.text, &state.best_text, state.best_score, ctx.nonce()) {
        Ok(j) => {
            let q = trace.judged(j);
            let text = out.text.clone();
            trace.individual(out, Some(q));
            Some((text, q))
        }
        Err(e) => {
            log::warn!("refinement rescore failed on {}: {e}", ctx.task.id);
            trace.individual(out, None);
            trace.flag(Flag::BranchFailed);
            None
        }
    }
}

/// Incremental redundancy: each round the critic's structured issues
/// drive a correction-list refinement, accepted iff it does not regress.
pub fn run_harq_ir(
    generator: &ChannelRef,
    critic: &ChannelRef,
    params: &HarqIrParams,
    ctx: &RunContext<'_>,
) -> Result<RunRecord> {
    if params.max_rounds == 0 {
        return Err(Error::validation("HARQ-IR needs max_rounds >= 1"));
    }
    let mut trace = Trace::new();
    let (text, q) = initial_attempt(generator, ctx, &mut trace)?;
    let mut state = IterationState::new(text, q, 1.0);
    let mut rounds = 1;
    if state.best_score >= params.tau {
        trace.flag(Flag::EarlyStop);
    } else {
        for k in 2..=params.max_rounds {
            rounds = k as u32;
            let issues = critique(critic, &state, None, ctx, &mut trace);
            if params.early_exit {
                if issues.is_empty() && state.best_score >= EARLY_EXIT_FRACTION * params.tau {
                    trace.flag(Flag::EarlyStop);
                    break;
                }
                if plateaued(&state.score_history, PLATEAU_WINDOW, PLATEAU_SPREAD) {
                    trace.flag(Flag::Plateau);
                    break;
                }
            }
            let prompt = refinement_prompt(ctx, &state.best_text, &issues);
            if let Some((text, q)) = refine(generator, prompt, &state, ctx, &mut trace) {
                state.offer(text, q, &issues);
            }
            if state.best_score >= params.tau {
                trace.flag(Flag::EarlyStop);
                break;
            }
        }
    }
    trace.history = state.score_history.clone();
    Ok(trace.finish(ctx, "harq_ir", state.best_text, state.best_score, rounds))
}

/// Turbo refinement. `rounds` in the record counts iteration 0 plus every
/// refinement iteration entered.
pub fn run_turbo(
    generator: &ChannelRef,
    critic: &ChannelRef,
    params: &TurboParams,
    ctx: &RunContext<'_>,
) -> Result<RunRecord> {
    if params.max_iterations == 0 {
        return Err(Error::validation("turbo needs max_iterations >= 1"));
    }
    if !(params.alpha0 > 0.0 && params.alpha0 <= 1.0) {
        return Err(Error::validation("alpha0 must lie in (0, 1]"));
    }
    if params.max_corrections == 0 {
        return Err(Error::validation("max_corrections must be >= 1"));
    }
    let mut trace = Trace::new();
    let (text, q) = initial_attempt(generator, ctx, &mut trace)?;
    let mut state = IterationState::new(text, q, params.alpha0);
    let mut rounds = 1;
    if state.best_score >= params.tau {
        trace.flag(Flag::EarlyStop);
    } else {
        for k in 1..=params.max_iterations {
            rounds = k as u32 + 1;
            let lens = LENSES[k % LENSES.len()];
            let issues = critique(critic, &state, Some(lens), ctx, &mut trace);
            if params.early_exit {
                if issues.is_empty() && state.best_score >= EARLY_EXIT_FRACTION * params.tau {
                    trace.flag(Flag::EarlyStop);
                    break;
                }
                if plateaued(&state.score_history, PLATEAU_WINDOW, PLATEAU_SPREAD) {
                    trace.flag(Flag::Plateau);
                    break;
                }
            }
            let corrections = extrinsic_scale(
                &issues,
                params.severity_floor,
                state.alpha,
                params.max_corrections,
            );
            if corrections.is_empty() {
                continue;
            }
            let prompt = refinement_prompt(ctx, &state.best_text, &corrections);
            match refine(generator, prompt, &state, ctx, &mut trace) {
                Some((text, q)) => {
                    if state.offer(text, q, &corrections) {
                        state.relax(params.alpha0);
                    } else {
                        state.damp();
                    }
                }
                None => state.damp(),
            }
            if state.consecutive_regressions >= DIVERGENCE_REGRESSIONS {
                trace.flag(Flag::Diverged);
                break;
            }
            if state.best_score >= params.tau {
                trace.flag(Flag::EarlyStop);
                break;
            }
        }
    }
    trace.history = state.score_history.clone();
    Ok(trace.finish(ctx, "turbo", state.best_text, state.best_score, rounds))
}
