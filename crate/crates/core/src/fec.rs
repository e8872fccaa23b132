//! Structured forward error correction: parity sections generated as
//! separate calls and a syndrome decoder that cross-checks them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{AgentOutput, CallRole, ChannelRef, Nonce};
use crate::error::{Error, Result};
use crate::prompts::{self, render};
use crate::record::{Flag, RunContext, RunRecord, Trace};

pub const DECODER_TEMPERATURE: f64 = 0.2;
pub const RATES: [f64; 5] = [1.0, 0.75, 0.50, 0.33, 0.25];
const RATE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParityKind {
    Reasoning,
    Verification,
    Alternative,
    Confidence,
}

impl ParityKind {
    pub const ALL: [ParityKind; 4] = [
        ParityKind::Reasoning,
        ParityKind::Verification,
        ParityKind::Alternative,
        ParityKind::Confidence,
    ];

    fn template(self) -> &'static str {
        match self {
            ParityKind::Reasoning => prompts::PARITY_REASONING,
            ParityKind::Verification => prompts::PARITY_VERIFICATION,
            ParityKind::Alternative => prompts::PARITY_ALTERNATIVE,
            ParityKind::Confidence => prompts::PARITY_CONFIDENCE,
        }
    }

    fn title(self) -> &'static str {
        match self {
            ParityKind::Reasoning => "Step-by-step re-derivation",
            ParityKind::Verification => "Claim verification",
            ParityKind::Alternative => "Independent alternative solution",
            ParityKind::Confidence => "Confidence tagging",
        }
    }

    fn check(self) -> &'static str {
        match self {
            ParityKind::Reasoning => "Does the step-by-step derivation reach the same conclusion?",
            ParityKind::Verification => "Did the verification find errors?",
            ParityKind::Alternative => "Does the independent solution agree?",
            ParityKind::Confidence => "Are the LOW-confidence items actually wrong?",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParitySection {
    pub kind: ParityKind,
    pub text: String,
    pub output: AgentOutput,
}

/// Parity sections for a code rate; lower rates add sections.
pub fn parity_plan(rate: f64) -> Result<Vec<ParityKind>> {
    let position = RATES
        .iter()
        .position(|r| (r - rate).abs() <= RATE_TOLERANCE)
        .ok_or_else(|| {
            Error::validation(format!(
                "unsupported code rate {rate}; expected one of {RATES:?}"
            ))
        })?;
    Ok(ParityKind::ALL[..position].to_vec())
}

fn decoder_prompt(ctx: &RunContext<'_>, main: &str, sections: &[ParitySection]) -> String {
    let blocks: Vec<String> = sections
        .iter()
        .enumerate()
        .map(|(i, s)| format!("[{}] {}:\n{}\n", i + 2, s.kind.title(), s.text))
        .collect();
    let checks: Vec<String> = sections
        .iter()
        .map(|s| format!("- {}", s.kind.check()))
        .collect();
    render(
        prompts::SYNDROME_DECODER,
        &[
            ("task", &ctx.task.prompt),
            ("answer", main),
            ("sections", &blocks.join("\n")),
            ("checks", &checks.join("\n")),
        ],
    )
}

/// Main answer, parity sections in parallel, syndrome decoding, and a
/// differential rescore against the main answer behind the guard.
pub fn run_fec(
    channel: &ChannelRef,
    decoder: &ChannelRef,
    rate: f64,
    ctx: &RunContext<'_>,
) -> Result<RunRecord> {
    let plan = parity_plan(rate)?;
    let mut trace = Trace::new();
    let main = ctx.call(
        channel,
        ctx.task.prompt.clone(),
        CallRole::Generate,
        None,
        ctx.nonce(),
    )?;
    let main_score = trace.judged(ctx.score(&main.text, ctx.nonce())?);
    let main_text = main.text.clone();
    trace.individual(main, Some(main_score));
    trace.history.push(main_score);
    if plan.is_empty() {
        return Ok(trace.finish(ctx, "fec", main_text, main_score, 1));
    }
    let base = ctx.reserve(plan.len());
    let results: Vec<Result<ParitySection>> = plan
        .par_iter()
        .enumerate()
        .map(|(i, kind)| {
            let prompt = render(
                kind.template(),
                &[("task", &ctx.task.prompt), ("answer", &main_text)],
            );
            let output = ctx.call(
                channel,
                prompt,
                CallRole::Parity,
                None,
                Nonce::new(ctx.stream, base + i as u64),
            )?;
            Ok(ParitySection {
                kind: *kind,
                text: output.text.clone(),
                output,
            })
        })
        .collect();
    let mut sections = Vec::new();
    for r in results {
        match r {
            Ok(s) => {
                trace.individual(s.output.clone(), None);
                sections.push(s);
            }
            Err(e) => {
                log::warn!("parity section failed on {}: {e}", ctx.task.id);
                trace.flag(Flag::ParityFailed);
            }
        }
    }
    let prompt = decoder_prompt(ctx, &main_text, &sections);
    let decoded = match ctx.call(
        decoder,
        prompt,
        CallRole::Decode,
        Some(DECODER_TEMPERATURE),
        ctx.nonce(),
    ) {
        Ok(out) => out,
        Err(e) => {
            log::warn!("decoder failed on {}: {e}", ctx.task.id);
            trace.flag(Flag::DecoderFailed);
            return Ok(trace.finish(ctx, "fec", main_text, main_score, 1));
        }
    };
    let text = decoded.text.clone();
    trace.overhead(decoded);
    if text.trim() == main_text.trim() {
        trace.flag(Flag::IdentityEcho);
        return Ok(trace.finish(ctx, "fec", main_text, main_score, 1));
    }
    if text.trim().is_empty() {
        trace.flag(Flag::GuardReverted);
        return Ok(trace.finish(ctx, "fec", main_text, main_score, 1));
    }
    let (final_text, q) = match ctx.differential(&text, &main_text, main_score, ctx.nonce()) {
        Ok(j) => {
            let q = trace.judged(j);
            trace.history.push(q);
            if q > main_score {
                (text, q)
            } else {
                trace.flag(Flag::GuardReverted);
                (main_text, main_score)
            }
        }
        Err(e) => {
            log::warn!("decoder rescore failed on {}: {e}", ctx.task.id);
            trace.flag(Flag::DecoderFailed);
            (main_text, main_score)
        }
    };
    Ok(trace.finish(ctx, "fec", final_text, q, 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_mapping() {
        assert!(parity_plan(1.0).unwrap().is_empty());
        assert_eq!(parity_plan(0.75).unwrap(), vec![ParityKind::Reasoning]);
        assert_eq!(
            parity_plan(0.50).unwrap(),
            vec![ParityKind::Reasoning, ParityKind::Verification]
        );
        assert_eq!(parity_plan(0.33).unwrap().len(), 3);
        assert_eq!(parity_plan(0.25).unwrap(), ParityKind::ALL.to_vec());
        assert!(parity_plan(0.6).is_err());
    }

    #[test]
    fn plan_is_monotone() {
        for w in RATES.windows(2) {
            let hi = parity_plan(w[0]).unwrap();
            let lo = parity_plan(w[1]).unwrap();
            assert!(hi.iter().all(|k| lo.contains(k)));
        }
    }
}
