//! Parallel branches with selection, equal-gain and maximal-ratio combining,
//! the wide-pool SC-N and cluster-sum MRC-N operators, and the
//! logprob-weighted soft variants.

use std::collections::HashMap;

use rayon::prelude::*;
use serde_json::Value;

use crate::channel::{intrinsic_confidence, AgentOutput, CallRole, ChannelRef, Nonce};
use crate::error::{Error, Result};
use crate::parse::extract_json_array;
use crate::prompts::{self, render};
use crate::record::{Flag, RunContext, RunRecord, Trace};
use crate::scoring::Judged;

pub const MRC_SYNTHESIS_TEMPERATURE: f64 = 0.1;
pub const EGC_SYNTHESIS_TEMPERATURE: f64 = 0.2;
pub const POOL_TEMPERATURE: f64 = 0.7;
pub const VOTER_TEMPERATURE: f64 = 0.0;
pub const DOMINANCE_RATIO: f64 = 0.5;

/// One generated and scored branch.
#[derive(Debug, Clone)]
pub struct BranchResult {
    pub output: AgentOutput,
    pub score: f64,
    pub channel_index: usize,
    judged: Option<Judged>,
}

/// How the clusters of a discrete-MRC run were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterSource {
    Voter,
    SingletonFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub source: ClusterSource,
}

impl ClusterAssignment {
    pub fn singletons(n: usize) -> Self {
        Self {
            labels: (0..n).collect(),
            source: ClusterSource::SingletonFallback,
        }
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// `w_i = q_i / sum q_j`, uniform when every score is zero.
pub fn mrc_weights(scores: &[f64]) -> Vec<f64> {
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter().map(|q| q / total).collect()
    } else {
        vec![1.0 / scores.len() as f64; scores.len()]
    }
}

/// True when every non-best score is below half the best.
pub fn dominance_fast_path(scores: &[f64]) -> bool {
    let Some(best) = argmax(scores) else {
        return false;
    };
    let threshold = DOMINANCE_RATIO * scores[best];
    scores
        .iter()
        .enumerate()
        .all(|(i, q)| i == best || *q < threshold)
}

/// Parses voter labels: a length-`n` array of integers or strings, with
/// labels normalized by equality into dense ids.
pub fn parse_cluster_labels(reply: &str, n: usize) -> Option<Vec<usize>> {
    let items = extract_json_array(reply)?;
    if items.len() != n {
        return None;
    }
    let mut ids: HashMap<String, usize> = HashMap::new();
    items
        .iter()
        .map(|v| {
            let key = match v {
                Value::Number(num) => num.as_f64().map(|f| format!("n{f}")),
                Value::String(s) => Some(format!("s{}", s.trim())),
                _ => None,
            }?;
            let next = ids.len();
            Some(*ids.entry(key).or_insert(next))
        })
        .collect()
}

/// Winning member under the cluster-sum rule: the cluster with the
/// largest weight sum (ties to the cluster seen first), then its
/// highest-weight member (ties to the lowest index).
pub fn cluster_winner(labels: &[usize], weights: &[f64]) -> Option<usize> {
    let mut order: Vec<usize> = Vec::new();
    let mut sums: HashMap<usize, f64> = HashMap::new();
    for (&l, &w) in labels.iter().zip(weights) {
        if !sums.contains_key(&l) {
            order.push(l);
        }
        *sums.entry(l).or_insert(0.0) += w;
    }
    let mut best_cluster: Option<usize> = None;
    for l in order {
        if best_cluster.is_none_or(|b| sums[&l] > sums[&b]) {
            best_cluster = Some(l);
        }
    }
    let cluster = best_cluster?;
    let mut member: Option<usize> = None;
    for (i, (&l, &w)) in labels.iter().zip(weights).enumerate() {
        if l == cluster && member.is_none_or(|m| w > weights[m]) {
            member = Some(i);
        }
    }
    member
}

struct BranchPlan {
    channel: ChannelRef,
    channel_index: usize,
    temperature: Option<f64>,
}

/// Generates (and optionally scores) all branches in parallel. Nonces are
/// reserved up front so results do not depend on scheduling.
fn fan_out(
    ctx: &RunContext<'_>,
    plan: &[BranchPlan],
    want_logprobs: bool,
    score: bool,
) -> Vec<Result<BranchResult>> {
    let base = ctx.reserve(2 * plan.len());
    plan.par_iter()
        .enumerate()
        .map(|(i, p)| {
            let gen_nonce = Nonce::new(ctx.stream, base + 2 * i as u64);
            let judge_nonce = Nonce::new(ctx.stream, base + 2 * i as u64 + 1);
            let mut req = crate::channel::GenerateRequest::new(
                ctx.task.prompt.clone(),
                CallRole::Generate,
                gen_nonce,
            )
            .logprobs(want_logprobs);
            req.temperature = p.temperature;
            let output = p.channel.generate(&req)?;
            let judged = if score {
                Some(ctx.score(&output.text, judge_nonce)?)
            } else {
                None
            };
            Ok(BranchResult {
                score: judged.as_ref().map_or(f64::NAN, Judged::value),
                output,
                channel_index: p.channel_index,
                judged,
            })
        })
        .collect()
}

/// Records successful branches in order; returns them, or an error when
/// every branch failed.
fn collect(trace: &mut Trace, results: Vec<Result<BranchResult>>) -> Result<Vec<BranchResult>> {
    let total = results.len();
    let mut ok = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(mut b) => {
                if let Some(j) = b.judged.take() {
                    trace.judged(j);
                }
                let score = if b.score.is_nan() {
                    None
                } else {
                    Some(b.score)
                };
                trace.individual(b.output.clone(), score);
                ok.push(b);
            }
            Err(e) => errors.push(e.to_string()),
        }
    }
    if ok.is_empty() {
        return Err(Error::AllBranchesFailed(total, errors.join("; ")));
    }
    if !errors.is_empty() {
        log::warn!(
            "{} of {total} branches failed: {}",
            errors.len(),
            errors.join("; ")
        );
        trace.flag(Flag::BranchFailed);
    }
    Ok(ok)
}

fn plan_per_channel(channels: &[ChannelRef]) -> Vec<BranchPlan> {
    channels
        .iter()
        .enumerate()
        .map(|(i, c)| BranchPlan {
            channel: c.clone(),
            channel_index: i,
            temperature: None,
        })
        .collect()
}

fn plan_round_robin(channels: &[ChannelRef], n: usize, temperature: f64) -> Vec<BranchPlan> {
    (0..n)
        .map(|i| BranchPlan {
            channel: channels[i % channels.len()].clone(),
            channel_index: i % channels.len(),
            temperature: Some(temperature),
        })
        .collect()
}

fn require_channels(channels: &[ChannelRef], min: usize, what: &str) -> Result<()> {
    if channels.len() < min {
        return Err(Error::validation(format!(
            "{what} needs at least {min} channel(s)"
        )));
    }
    Ok(())
}

fn select_best(branches: &[BranchResult]) -> usize {
    let scores: Vec<f64> = branches.iter().map(|b| b.score).collect();
    argmax(&scores).expect("non-empty")
}

/// Selection combining: the highest-scoring branch.
pub fn run_sc(channels: &[ChannelRef], ctx: &RunContext<'_>) -> Result<RunRecord> {
    require_channels(channels, 1, "selection combining")?;
    let mut trace = Trace::new();
    let branches = collect(
        &mut trace,
        fan_out(ctx, &plan_per_channel(channels), false, true),
    )?;
    let best = select_best(&branches);
    let b = &branches[best];
    Ok(trace.finish(ctx, "diversity_sc", b.output.text.clone(), b.score, 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Combiner {
    Mrc,
    Egc,
}

fn synthesis_prompt(
    ctx: &RunContext<'_>,
    branches: &[BranchResult],
    weights: &[f64],
    best: usize,
    combiner: Combiner,
) -> String {
    let mut blocks = Vec::new();
    match combiner {
        Combiner::Mrc => {
            let mut order: Vec<usize> = (0..branches.len()).collect();
            order.sort_by(|a, b| {
                branches[*b]
                    .score
                    .total_cmp(&branches[*a].score)
                    .then(a.cmp(b))
            });
            let mut alt = 0;
            for i in order {
                let b = &branches[i];
                let tag = if i == best {
                    "[BEST]".to_string()
                } else {
                    alt += 1;
                    format!("[ALT-{alt}]")
                };
                blocks.push(format!(
                    "{tag} (model: {}, quality score: {:.3}, weight: {:.3})\n{}\n",
                    b.output.model_id, b.score, weights[i], b.output.text
                ));
            }
            render(
                prompts::SYNTHESIS_MRC,
                &[
                    ("task", &ctx.task.prompt),
                    ("responses", &blocks.join("\n")),
                ],
            )
        }
        Combiner::Egc => {
            for (i, b) in branches.iter().enumerate() {
                blocks.push(format!(
                    "[RESPONSE {}] (weight: {:.3})\n{}\n",
                    i + 1,
                    weights[i],
                    b.output.text
                ));
            }
            render(
                prompts::SYNTHESIS_EGC,
                &[
                    ("task", &ctx.task.prompt),
                    ("responses", &blocks.join("\n")),
                ],
            )
        }
    }
}

/// Synthesis with identity detection and the best-of-sequence guard.
/// Returns `(text, quality)`.
fn synthesize_guarded(
    ctx: &RunContext<'_>,
    trace: &mut Trace,
    synthesizer: &ChannelRef,
    prompt: String,
    temperature: f64,
    best_text: &str,
    best_score: f64,
) -> (String, f64) {
    let synthesized = match ctx.call(
        synthesizer,
        prompt,
        CallRole::Synthesize,
        Some(temperature),
        ctx.nonce(),
    ) {
        Ok(out) => out,
        Err(e) => {
            log::warn!("synthesis failed on {}: {e}", ctx.task.id);
            trace.flag(Flag::SynthesisFailed);
            return (best_text.to_string(), best_score);
        }
    };
    let text = synthesized.text.clone();
    trace.overhead(synthesized);
    if text.trim() == best_text.trim() {
        trace.flag(Flag::IdentityEcho);
        return (best_text.to_string(), best_score);
    }
    if text.trim().is_empty() {
        trace.flag(Flag::GuardReverted);
        return (best_text.to_string(), best_score);
    }
    match ctx.differential(&text, best_text, best_score, ctx.nonce()) {
        Ok(j) => {
            let q = trace.judged(j);
            trace.history.push(q);
            if q > best_score {
                (text, q)
            } else {
                trace.flag(Flag::GuardReverted);
                (best_text.to_string(), best_score)
            }
        }
        Err(e) => {
            log::warn!("rescoring synthesis failed on {}: {e}", ctx.task.id);
            trace.flag(Flag::SynthesisFailed);
            (best_text.to_string(), best_score)
        }
    }
}

fn run_combining(
    channels: &[ChannelRef],
    synthesizer: &ChannelRef,
    ctx: &RunContext<'_>,
    combiner: Combiner,
) -> Result<RunRecord> {
    let id = match combiner {
        Combiner::Mrc => "diversity_mrc",
        Combiner::Egc => "diversity_egc",
    };
    let mut trace = Trace::new();
    let branches = collect(
        &mut trace,
        fan_out(ctx, &plan_per_channel(channels), false, true),
    )?;
    let best = select_best(&branches);
    let best_text = branches[best].output.text.clone();
    let best_score = branches[best].score;
    trace.history.extend(branches.iter().map(|b| b.score));
    if branches.len() < 2 {
        return Ok(trace.finish(ctx, id, best_text, best_score, 1));
    }
    let scores: Vec<f64> = branches.iter().map(|b| b.score).collect();
    let weights = match combiner {
        Combiner::Mrc => mrc_weights(&scores),
        Combiner::Egc => vec![1.0 / scores.len() as f64; scores.len()],
    };
    if combiner == Combiner::Mrc && dominance_fast_path(&scores) {
        trace.flag(Flag::FastPath);
        return Ok(trace.finish(ctx, id, best_text, best_score, 1));
    }
    let temperature = match combiner {
        Combiner::Mrc => MRC_SYNTHESIS_TEMPERATURE,
        Combiner::Egc => EGC_SYNTHESIS_TEMPERATURE,
    };
    let prompt = synthesis_prompt(ctx, &branches, &weights, best, combiner);
    let (text, q) = synthesize_guarded(
        ctx,
        &mut trace,
        synthesizer,
        prompt,
        temperature,
        &best_text,
        best_score,
    );
    Ok(trace.finish(ctx, id, text, q, 1))
}

/// Quality-weighted synthesis with dominance fast path, identity detection
/// and the best-of-sequence guard.
pub fn run_mrc(
    channels: &[ChannelRef],
    synthesizer: &ChannelRef,
    ctx: &RunContext<'_>,
) -> Result<RunRecord> {
    require_channels(channels, 2, "maximal-ratio combining")?;
    run_combining(channels, synthesizer, ctx, Combiner::Mrc)
}

/// Uniform-weight synthesis with the best-of-sequence guard.
pub fn run_egc(
    channels: &[ChannelRef],
    synthesizer: &ChannelRef,
    ctx: &RunContext<'_>,
) -> Result<RunRecord> {
    require_channels(channels, 1, "equal-gain combining")?;
    run_combining(channels, synthesizer, ctx, Combiner::Egc)
}

/// `n` samples cycled through the channel pool; the best one wins.
pub fn run_sc_n(channels: &[ChannelRef], n: usize, ctx: &RunContext<'_>) -> Result<RunRecord> {
    require_channels(channels, 1, "SC-N")?;
    if n == 0 {
        return Err(Error::validation("SC-N needs n >= 1"));
    }
    let mut trace = Trace::new();
    let plan = plan_round_robin(channels, n, POOL_TEMPERATURE);
    let samples = collect(&mut trace, fan_out(ctx, &plan, false, true))?;
    let best = select_best(&samples);
    trace.history.extend(samples.iter().map(|b| b.score));
    let b = &samples[best];
    Ok(trace.finish(ctx, "diversity_sc_n", b.output.text.clone(), b.score, 1))
}

fn ask_voter(
    ctx: &RunContext<'_>,
    trace: &mut Trace,
    voter: &ChannelRef,
    samples: &[BranchResult],
) -> ClusterAssignment {
    let listing: Vec<String> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| format!("[{i}]\n{}\n", s.output.text))
        .collect();
    let n = samples.len().to_string();
    let prompt = render(
        prompts::VOTER,
        &[
            ("task", &ctx.task.prompt),
            ("samples", &listing.join("\n")),
            ("n", &n),
        ],
    );
    match ctx.call(
        voter,
        prompt,
        CallRole::Vote,
        Some(VOTER_TEMPERATURE),
        ctx.nonce(),
    ) {
        Ok(out) => {
            let labels = parse_cluster_labels(&out.text, samples.len());
            trace.overhead(out);
            match labels {
                Some(labels) => ClusterAssignment {
                    labels,
                    source: ClusterSource::Voter,
                },
                None => {
                    trace.flag(Flag::VoterFallback);
                    ClusterAssignment::singletons(samples.len())
                }
            }
        }
        Err(e) => {
            log::warn!("voter failed on {}: {e}", ctx.task.id);
            trace.flag(Flag::VoterFallback);
            ClusterAssignment::singletons(samples.len())
        }
    }
}

/// Cluster-summed-quality MRC over `n` round-robin samples.
pub fn run_mrc_discrete_n(
    channels: &[ChannelRef],
    n: usize,
    voter: &ChannelRef,
    ctx: &RunContext<'_>,
) -> Result<RunRecord> {
    require_channels(channels, 1, "discrete MRC-N")?;
    if n < 2 {
        return Err(Error::validation("discrete MRC-N needs n >= 2"));
    }
    let mut trace = Trace::new();
    let plan = plan_round_robin(channels, n, POOL_TEMPERATURE);
    let samples = collect(&mut trace, fan_out(ctx, &plan, false, true))?;
    trace.history.extend(samples.iter().map(|b| b.score));
    let clusters = if samples.len() >= 2 {
        ask_voter(ctx, &mut trace, voter, &samples)
    } else {
        ClusterAssignment::singletons(samples.len())
    };
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let winner = cluster_winner(&clusters.labels, &scores).expect("non-empty");
    let w = &samples[winner];
    Ok(trace.finish(
        ctx,
        "diversity_mrc_discrete_n",
        w.output.text.clone(),
        w.score,
        1,
    ))
}

fn require_logprobs(channels: &[ChannelRef]) -> Result<()> {
    for c in channels {
        if !c.config().supports_logprobs {
            return Err(Error::Capability(format!(
                "channel {} does not expose logprobs",
                c.config().display_name()
            )));
        }
    }
    Ok(())
}

fn confidences(branches: &[BranchResult]) -> Result<Vec<f64>> {
    branches
        .iter()
        .map(|b| intrinsic_confidence(&b.output))
        .collect()
}

/// Cluster-sum MRC-N with intrinsic confidences as the per-sample weight;
/// only the returned sample is judged.
pub fn run_mrc_discrete_n_soft(
    channels: &[ChannelRef],
    n: usize,
    voter: &ChannelRef,
    ctx: &RunContext<'_>,
) -> Result<RunRecord> {
    require_channels(channels, 1, "soft discrete MRC-N")?;
    require_logprobs(channels)?;
    if n < 2 {
        return Err(Error::validation("discrete MRC-N needs n >= 2"));
    }
    let mut trace = Trace::new();
    let plan = plan_round_robin(channels, n, POOL_TEMPERATURE);
    let samples = collect(&mut trace, fan_out(ctx, &plan, true, false))?;
    let conf = confidences(&samples)?;
    trace.history.extend(conf.iter().copied());
    let clusters = if samples.len() >= 2 {
        ask_voter(ctx, &mut trace, voter, &samples)
    } else {
        ClusterAssignment::singletons(samples.len())
    };
    let winner = cluster_winner(&clusters.labels, &conf).expect("non-empty");
    let q = trace.judged(ctx.score(&samples[winner].output.text, ctx.nonce())?);
    trace.set_score(winner, q);
    Ok(trace.finish(
        ctx,
        "diversity_mrc_discrete_n_soft",
        samples[winner].output.text.clone(),
        q,
        1,
    ))
}

/// MRC with intrinsic-confidence weights. Only the most confident branch
/// is judged; the synthesis is scored differentially against it.
pub fn run_soft_mrc(
    channels: &[ChannelRef],
    synthesizer: &ChannelRef,
    ctx: &RunContext<'_>,
) -> Result<RunRecord> {
    require_channels(channels, 2, "soft MRC")?;
    require_logprobs(channels)?;
    let mut trace = Trace::new();
    let branches = collect(
        &mut trace,
        fan_out(ctx, &plan_per_channel(channels), true, false),
    )?;
    let conf = confidences(&branches)?;
    trace.history.extend(conf.iter().copied());
    let best = argmax(&conf).expect("non-empty");
    let best_text = branches[best].output.text.clone();
    let best_score = trace.judged(ctx.score(&best_text, ctx.nonce())?);
    trace.set_score(best, best_score);
    if branches.len() < 2 || dominance_fast_path(&conf) {
        if branches.len() >= 2 {
            trace.flag(Flag::FastPath);
        }
        return Ok(trace.finish(ctx, "soft_mrc", best_text, best_score, 1));
    }
    let weights = mrc_weights(&conf);
    let mut scored = branches.clone();
    for (b, c) in scored.iter_mut().zip(&conf) {
        b.score = *c;
    }
    let prompt = synthesis_prompt(ctx, &scored, &weights, best, Combiner::Mrc);
    let (text, q) = synthesize_guarded(
        ctx,
        &mut trace,
        synthesizer,
        prompt,
        MRC_SYNTHESIS_TEMPERATURE,
        &best_text,
        best_score,
    );
    Ok(trace.finish(ctx, "soft_mrc", text, q, 1))
}
