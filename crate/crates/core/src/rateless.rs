//! Rateless sampling: draw until a confidence rule is met, then decode by
//! fast path, erasure marking and weighted synthesis.

use serde::{Deserialize, Serialize};

use crate::channel::{intrinsic_confidence, AgentOutput, CallRole, ChannelRef, GenerateRequest};
use crate::diversity::argmax;
use crate::error::{Error, Result};
use crate::prompts::{self, render};
use crate::record::{Flag, RunContext, RunRecord, Trace};

pub const MEAN_WEIGHT: f64 = 0.6;
pub const AGREEMENT_WEIGHT: f64 = 0.4;
pub const FAST_PATH_GAP: f64 = 0.20;
pub const ERASURE_GAP: f64 = 0.10;
pub const SOFT_ERASURE_RATIO: f64 = 0.5;
pub const SYNTHESIS_TEMPERATURE: f64 = 0.1;
const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FountainParams {
    pub n_max: usize,
    pub n_min: usize,
    pub gamma: f64,
}

impl Default for FountainParams {
    fn default() -> Self {
        Self {
            n_max: 10,
            n_min: 2,
            gamma: 0.85,
        }
    }
}

impl FountainParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(Error::validation("fountain needs 1 <= n_min <= n_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    MaxSamples,
}

/// Channel index (0-based) and temperature of sample `n` (1-based).
pub fn sample_schedule(n: usize, d: usize) -> (usize, f64) {
    ((n - 1) % d, 0.5 + 0.1 * (n % 5) as f64)
}

/// `0.6 mean + 0.4 (1 - (max - min))` over the top `ceil(n/2)` scores.
pub fn stopping_confidence(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = &sorted[..scores.len().div_ceil(2)];
    let spread = top[0] - top[top.len() - 1];
    MEAN_WEIGHT * mean + AGREEMENT_WEIGHT * (1.0 - spread)
}

/// `0.6 mean + 0.4 (1 - (max - min))` over all confidences.
pub fn soft_stopping_confidence(confidences: &[f64]) -> f64 {
    if confidences.is_empty() {
        return 0.0;
    }
    let mean = confidences.iter().sum::<f64>() / confidences.len() as f64;
    let max = confidences
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let min = confidences.iter().copied().fold(f64::INFINITY, f64::min);
    MEAN_WEIGHT * mean + AGREEMENT_WEIGHT * (1.0 - (max - min))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodePlan {
    /// One sample only, or every other sample erased.
    Single(usize),
    /// The best sample dominates the runner-up.
    FastPath(usize),
    /// Synthesize over the surviving indices, best first.
    Synthesize(Vec<usize>),
}

/// Decision for judge-scored samples.
pub fn decode_plan(scores: &[f64]) -> DecodePlan {
    let best = argmax(scores).expect("non-empty scores");
    if scores.len() == 1 {
        return DecodePlan::Single(best);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    if scores[order[0]] - scores[order[1]] > FAST_PATH_GAP + EPS {
        return DecodePlan::FastPath(best);
    }
    let survivors: Vec<usize> = order
        .into_iter()
        .filter(|&i| scores[best] - scores[i] <= ERASURE_GAP + EPS)
        .collect();
    if survivors.len() == 1 {
        DecodePlan::Single(best)
    } else {
        DecodePlan::Synthesize(survivors)
    }
}

/// Decision for confidence-weighted samples: erase `c < 0.5 c_max`.
pub fn soft_decode_plan(confidences: &[f64]) -> DecodePlan {
    let best = argmax(confidences).expect("non-empty confidences");
    let cutoff = SOFT_ERASURE_RATIO * confidences[best];
    let mut survivors: Vec<usize> = (0..confidences.len())
        .filter(|&i| confidences[i] >= cutoff)
        .collect();
    survivors.sort_by(|a, b| confidences[*b].total_cmp(&confidences[*a]).then(a.cmp(b)));
    if survivors.len() == 1 {
        DecodePlan::Single(best)
    } else {
        DecodePlan::Synthesize(survivors)
    }
}

struct Sample {
    output: AgentOutput,
    weight: f64,
}

/// Draws samples until the stopping rule fires. `weigh` turns an output
/// into its weight (judge score or confidence) and records judge calls.
fn draw(
    channels: &[ChannelRef],
    params: &FountainParams,
    want_logprobs: bool,
    ctx: &RunContext<'_>,
    trace: &mut Trace,
    confidence: fn(&[f64]) -> f64,
    mut weigh: impl FnMut(&AgentOutput, &mut Trace) -> Result<f64>,
) -> Result<(Vec<Sample>, StopReason)> {
    let mut samples: Vec<Sample> = Vec::new();
    let mut errors = Vec::new();
    for n in 1..=params.n_max {
        let (c, t) = sample_schedule(n, channels.len());
        let req = GenerateRequest::new(ctx.task.prompt.clone(), CallRole::Generate, ctx.nonce())
            .temperature(t)
            .logprobs(want_logprobs);
        match channels[c].generate(&req).and_then(|out| {
            let w = weigh(&out, trace)?;
            Ok((out, w))
        }) {
            Ok((output, weight)) => samples.push(Sample { output, weight }),
            Err(e) => {
                trace.flag(Flag::BranchFailed);
                errors.push(e.to_string());
            }
        }
        if n >= params.n_min && !samples.is_empty() {
            let weights: Vec<f64> = samples.iter().map(|s| s.weight).collect();
            let g = confidence(&weights);
            trace.history.push(g);
            if g >= params.gamma {
                return Ok((samples, StopReason::Threshold));
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::AllBranchesFailed(params.n_max, errors.join("; ")));
    }
    Ok((samples, StopReason::MaxSamples))
}

fn synthesis_prompt(ctx: &RunContext<'_>, samples: &[Sample], survivors: &[usize]) -> String {
    let total: f64 = survivors.iter().map(|&i| samples[i].weight).sum();
    let listing: Vec<String> = survivors
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            let w = if total > 0.0 {
                samples[i].weight / total
            } else {
                1.0 / survivors.len() as f64
            };
            format!(
                "[SAMPLE {}] (weight: {w:.3})\n{}\n",
                rank + 1,
                samples[i].output.text
            )
        })
        .collect();
    render(
        prompts::FOUNTAIN_SYNTHESIS,
        &[("task", &ctx.task.prompt), ("samples", &listing.join("\n"))],
    )
}

/// Synthesizes, scores the result independently and applies the guard.
fn synthesize(
    synthesizer: &ChannelRef,
    prompt: String,
    best_text: &str,
    best_score: f64,
    ctx: &RunContext<'_>,
    trace: &mut Trace,
) -> (String, f64) {
    let out = match ctx.call(
        synthesizer,
        prompt,
        CallRole::Synthesize,
        Some(SYNTHESIS_TEMPERATURE),
        ctx.nonce(),
    ) {
        Ok(out) => out,
        Err(e) => {
            log::warn!("fountain synthesis failed on {}: {e}", ctx.task.id);
            trace.flag(Flag::SynthesisFailed);
            return (best_text.to_string(), best_score);
        }
    };
    let text = out.text.clone();
    trace.overhead(out);
    if text.trim() == best_text.trim() {
        trace.flag(Flag::IdentityEcho);
        return (best_text.to_string(), best_score);
    }
    if text.trim().is_empty() {
        trace.flag(Flag::GuardReverted);
        return (best_text.to_string(), best_score);
    }
    match ctx.score(&text, ctx.nonce()) {
        Ok(j) => {
            let q = trace.judged(j);
            if q > best_score {
                (text, q)
            } else {
                trace.flag(Flag::GuardReverted);
                (best_text.to_string(), best_score)
            }
        }
        Err(e) => {
            log::warn!("fountain rescore failed on {}: {e}", ctx.task.id);
            trace.flag(Flag::SynthesisFailed);
            (best_text.to_string(), best_score)
        }
    }
}

/// Judge-scored fountain decoder.
pub fn run_fountain(
    channels: &[ChannelRef],
    synthesizer: &ChannelRef,
    params: &FountainParams,
    ctx: &RunContext<'_>,
) -> Result<RunRecord> {
    params.validate()?;
    if channels.is_empty() {
        return Err(Error::validation("fountain needs at least one channel"));
    }
    let mut trace = Trace::new();
    let (samples, reason) = draw(
        channels,
        params,
        false,
        ctx,
        &mut trace,
        stopping_confidence,
        |out, trace| Ok(trace.judged(ctx.score(&out.text, ctx.nonce())?)),
    )?;
    if reason == StopReason::Threshold {
        trace.flag(Flag::EarlyStop);
    }
    let rounds = samples.len() as u32;
    for s in &samples {
        trace.individual(s.output.clone(), Some(s.weight));
    }
    let scores: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    let (text, q) = match decode_plan(&scores) {
        DecodePlan::Single(i) => (samples[i].output.text.clone(), scores[i]),
        DecodePlan::FastPath(i) => {
            trace.flag(Flag::FastPath);
            (samples[i].output.text.clone(), scores[i])
        }
        DecodePlan::Synthesize(survivors) => {
            let best = survivors[0];
            let prompt = synthesis_prompt(ctx, &samples, &survivors);
            synthesize(
                synthesizer,
                prompt,
                &samples[best].output.text,
                scores[best],
                ctx,
                &mut trace,
            )
        }
    };
    Ok(trace.finish(ctx, "fountain", text, q, rounds))
}

/// Confidence-driven fountain: intrinsic confidences replace judge scores
/// in the stopping rule and in erasure marking. Only the most confident
/// sample and the synthesis are judged.
pub fn run_soft_fountain(
    channels: &[ChannelRef],
    synthesizer: &ChannelRef,
    params: &FountainParams,
    ctx: &RunContext<'_>,
) -> Result<RunRecord> {
    params.validate()?;
    if channels.is_empty() {
        return Err(Error::validation(
            "soft fountain needs at least one channel",
        ));
    }
    for c in channels {
        if !c.config().supports_logprobs {
            return Err(Error::Capability(format!(
                "channel {} does not expose logprobs",
                c.config().display_name()
            )));
        }
    }
    let mut trace = Trace::new();
    let (samples, reason) = draw(
        channels,
        params,
        true,
        ctx,
        &mut trace,
        soft_stopping_confidence,
        |out, _| intrinsic_confidence(out),
    )?;
    if reason == StopReason::Threshold {
        trace.flag(Flag::EarlyStop);
    }
    let rounds = samples.len() as u32;
    let indices: Vec<usize> = samples
        .iter()
        .map(|s| trace.individual(s.output.clone(), None))
        .collect();
    let conf: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    let best = argmax(&conf).expect("non-empty");
    let best_text = samples[best].output.text.clone();
    let best_score = trace.judged(ctx.score(&best_text, ctx.nonce())?);
    trace.set_score(indices[best], best_score);
    let (text, q) = match soft_decode_plan(&conf) {
        DecodePlan::Single(_) | DecodePlan::FastPath(_) => (best_text, best_score),
        DecodePlan::Synthesize(survivors) => {
            let prompt = synthesis_prompt(ctx, &samples, &survivors);
            synthesize(synthesizer, prompt, &best_text, best_score, ctx, &mut trace)
        }
    };
    Ok(trace.finish(ctx, "soft_fountain", text, q, rounds))
}
