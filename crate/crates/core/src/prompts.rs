//! Prompt templates shipped as data files, with `{name}` placeholders.

pub const JUDGE_CHECKLIST: &str = include_str!("../data/prompts/judge_checklist.txt");
pub const JUDGE_REASK: &str = include_str!("../data/prompts/judge_reask.txt");
pub const SYNTHESIS_MRC: &str = include_str!("../data/prompts/synthesis_mrc.txt");
pub const SYNTHESIS_EGC: &str = include_str!("../data/prompts/synthesis_egc.txt");
pub const CHASE_SYNTHESIS: &str = include_str!("../data/prompts/chase_synthesis.txt");
pub const FOUNTAIN_SYNTHESIS: &str = include_str!("../data/prompts/fountain_synthesis.txt");
pub const CRITIC: &str = include_str!("../data/prompts/critic.txt");
pub const CORRECTION_LIST: &str = include_str!("../data/prompts/correction_list.txt");
pub const REWRITE: &str = include_str!("../data/prompts/rewrite.txt");
pub const VOTER: &str = include_str!("../data/prompts/voter.txt");
pub const PARITY_REASONING: &str = include_str!("../data/prompts/parity_reasoning.txt");
pub const PARITY_VERIFICATION: &str = include_str!("../data/prompts/parity_verification.txt");
pub const PARITY_ALTERNATIVE: &str = include_str!("../data/prompts/parity_alternative.txt");
pub const PARITY_CONFIDENCE: &str = include_str!("../data/prompts/parity_confidence.txt");
pub const SYNDROME_DECODER: &str = include_str!("../data/prompts/syndrome_decoder.txt");
pub const PILOT_PROBE: &str = include_str!("../data/prompts/pilot_probe.txt");
pub const SELF_RATE: &str = include_str!("../data/prompts/self_rate.txt");

/// Substitutes `{key}` placeholders in one pass; substituted values are
/// never rescanned. Unknown placeholders are left as-is.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let key = close.map(|c| &after[..c]);
        match key.and_then(|k| vars.iter().find(|(name, _)| *name == k)) {
            Some((k, v)) => {
                out.push_str(v);
                rest = &after[k.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// `Reference answer:` block, or an empty string.
pub fn reference_block(reference: Option<&str>) -> String {
    match reference {
        Some(r) if !r.trim().is_empty() => format!("\nReference answer:\n{r}\n"),
        _ => String::new(),
    }
}
