//! Adaptive technique selection.
//!
//! A pilot probe estimates task difficulty and a first-match table picks the
//! coding scheme. The cache-backed routers live in the submodules.

pub mod features;
pub mod knn;
pub mod learned;

use serde::{Deserialize, Serialize};

use crate::channel::{CallRole, ChannelRef, GenerateRequest};
use crate::error::{Error, Result};
use crate::prompts::{self, render};
use crate::record::{Flag, RunContext, RunRecord, Trace};
use crate::technique::{ChannelPool, TechniqueConfig};

pub use features::{EmbeddingSource, HashEmbedder};
pub use knn::{
    feasible_quality, lambda_sweep, semknn_dispatch, CacheEntry, SweepPoint, TechniqueStats,
};
pub use learned::{fit_logit_router, fit_ridge_router, RouterKind, RouterWeights};

pub const SELF_RATE_TEMPERATURE: f64 = 0.1;
pub const PROBE_MAX_TOKENS: u32 = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultySource {
    Logprobs,
    SelfRate,
    Fallback,
}

#[derive(Debug, Clone)]
pub struct PilotEstimate {
    pub difficulty: f64,
    pub source: DifficultySource,
    pub outputs: Vec<crate::channel::AgentOutput>,
}

/// `1 - exp(mean logprob)`, clamped to [0, 1].
pub fn difficulty_from_logprob(mean_logprob: f64) -> f64 {
    if mean_logprob.is_nan() {
        return 1.0;
    }
    (1.0 - mean_logprob.exp()).clamp(0.0, 1.0)
}

fn parse_rating(text: &str) -> Option<f64> {
    let re = regex::Regex::new(r"[-+]?[0-9]*\.?[0-9]+").expect("static regex");
    let v: f64 = re.find(text)?.as_str().parse().ok()?;
    v.is_finite().then(|| v.clamp(0.0, 1.0))
}

/// Probes the channel once with logprobs; falls back to a self-rating call,
/// then to maximum difficulty.
pub fn pilot_difficulty(channel: &ChannelRef, ctx: &RunContext<'_>) -> PilotEstimate {
    let mut outputs = Vec::new();
    let probe_prompt = render(prompts::PILOT_PROBE, &[("task", &ctx.task.prompt)]);
    if channel.config().supports_logprobs {
        let mut req =
            GenerateRequest::new(probe_prompt, CallRole::Probe, ctx.nonce()).logprobs(true);
        req.max_tokens = Some(PROBE_MAX_TOKENS);
        match channel.generate(&req) {
            Ok(out) => {
                let mean = out.mean_logprob;
                outputs.push(out);
                if let Some(m) = mean {
                    return PilotEstimate {
                        difficulty: difficulty_from_logprob(m),
                        source: DifficultySource::Logprobs,
                        outputs,
                    };
                }
            }
            Err(e) => log::warn!("pilot probe failed on {}: {e}", ctx.task.id),
        }
    }
    let rate_prompt = render(prompts::SELF_RATE, &[("task", &ctx.task.prompt)]);
    let req = GenerateRequest::new(rate_prompt, CallRole::SelfRate, ctx.nonce())
        .temperature(SELF_RATE_TEMPERATURE);
    match channel.generate(&req) {
        Ok(out) => {
            let rating = parse_rating(&out.text);
            outputs.push(out);
            if let Some(d) = rating {
                return PilotEstimate {
                    difficulty: d,
                    source: DifficultySource::SelfRate,
                    outputs,
                };
            }
        }
        Err(e) => log::warn!("self-rating failed on {}: {e}", ctx.task.id),
    }
    PilotEstimate {
        difficulty: 1.0,
        source: DifficultySource::Fallback,
        outputs,
    }
}

/// One row of a modulation-and-coding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsProfile {
    pub name: String,
    /// Half-open `[lo, hi)`.
    pub difficulty_range: (f64, f64),
    #[serde(flatten)]
    pub technique: TechniqueConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

impl McsProfile {
    pub fn new(name: impl Into<String>, lo: f64, hi: f64, technique: TechniqueConfig) -> Self {
        Self {
            name: name.into(),
            difficulty_range: (lo, hi),
            technique,
            model_id: None,
        }
    }

    pub fn contains(&self, d: f64) -> bool {
        let (lo, hi) = self.difficulty_range;
        lo <= d && d < hi
    }
}

/// The last profile is the catch-all.
pub fn validate_profiles(profiles: &[McsProfile]) -> Result<()> {
    if profiles.is_empty() {
        return Err(Error::validation("MCS table needs at least one profile"));
    }
    for p in profiles {
        let (lo, hi) = p.difficulty_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::validation(format!(
                "profile {}: difficulty range [{lo}, {hi}) is not inside [0, 1]",
                p.name
            )));
        }
        if matches!(p.technique, TechniqueConfig::Acm { .. }) {
            return Err(Error::validation(format!(
                "profile {} cannot nest an adaptive table",
                p.name
            )));
        }
        p.technique.validate()?;
    }
    Ok(())
}

/// First profile whose range contains `d`, else the last (catch-all).
pub fn select_profile(profiles: &[McsProfile], d: f64) -> Option<&McsProfile> {
    profiles
        .iter()
        .find(|p| p.contains(d))
        .or_else(|| profiles.last())
}

pub fn run_acm(
    pool: &ChannelPool,
    probe: &ChannelRef,
    profiles: &[McsProfile],
    ctx: &RunContext<'_>,
) -> Result<RunRecord> {
    validate_profiles(profiles)?;
    let estimate = pilot_difficulty(probe, ctx);
    let mut trace = Trace::new();
    for out in estimate.outputs {
        trace.overhead(out);
    }
    match estimate.source {
        DifficultySource::Logprobs => {}
        DifficultySource::SelfRate => trace.flag(Flag::ProbeFallback),
        DifficultySource::Fallback => {
            trace.flag(Flag::ProbeFallback);
            trace.flag(Flag::MaxProtection);
            trace.flag(Flag::Degraded);
        }
    }
    let profile = select_profile(profiles, estimate.difficulty).expect("validated non-empty");
    let view = pool.preferring(profile.model_id.as_deref());
    let inner = profile.technique.run(&view, ctx)?;
    let text = inner.combined_text.clone();
    let q = inner.final_quality;
    let rounds = inner.rounds;
    trace.absorb(inner);
    trace.difficulty = Some(estimate.difficulty);
    trace.profile = Some(profile.name.clone());
    Ok(trace.finish(ctx, "acm", text, q, rounds))
}
