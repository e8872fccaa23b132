//! Deterministic channel simulator.
//!
//! Each call draws a latent quality and returns the canonical text
//! `Q=<quality>`. Branch correlation comes from a Gaussian copula: every call
//! on the same `(stream, prompt)` shares a common shock `c`, and a channel
//! with correlation `rho` uses `z = l c + sqrt(1 - l^2) e` with
//! `l = sign(rho) sqrt(|rho|)`, so two channels configured with the same
//! `rho >= 0` correlate at exactly `rho`.
//!
//! Roles decide the response:
//!
//! | role | response |
//! |------|----------|
//! | generate, probe | `Q=` draw around `base_quality` |
//! | parity | `P=` draw around `base_quality` |
//! | synthesize, refine, decode | `Q=` draw around `f(anchor)`, anchor = max `Q=` in the prompt |
//! | critique | JSON issue list, longer for lower anchors, `[]` at 0.95 and above |
//! | vote | JSON cluster labels, one per `Q=` marker, by quality bucket |
//! | judge | `SCORE=` last `Q=` marker plus judge noise |
//! | self-rate | `1 - q` as a difficulty rating |

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use regex::Regex;

use super::{check_request, AgentOutput, CallRole, Channel, ChannelConfig, GenerateRequest};
use crate::error::{Error, Result};
use crate::seed::{fnv1a, mix};

pub const QUALITY_MARKER: &str = "Q=";
pub const PARITY_MARKER: &str = "P=";

const COMMON_SALT: u64 = 0x636f_6d6d_6f6e;
const JUDGE_SALT: u64 = 0x6a75_6467_65;

fn marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|[^A-Za-z0-9_])Q=([0-9]+(?:\.[0-9]+)?)").unwrap())
}

/// All `Q=` quality markers in order of appearance.
pub fn parse_markers(text: &str) -> Vec<f64> {
    marker_regex()
        .captures_iter(text)
        .filter_map(|c| c[1].parse::<f64>().ok())
        .collect()
}

#[derive(Debug)]
pub struct SyntheticChannel {
    config: ChannelConfig,
}

impl SyntheticChannel {
    pub fn new(config: ChannelConfig) -> Result<Self> {
        config.validate()?;
        if config.synthetic.is_none() {
            return Err(Error::validation(
                "synthetic channel needs a synthetic spec",
            ));
        }
        Ok(Self { config })
    }

    fn latent(&self, req: &GenerateRequest, rng: &mut ChaCha8Rng) -> f64 {
        let spec = self.config.synthetic.as_ref().expect("validated");
        let e: f64 = rng.sample(StandardNormal);
        let rho = spec.branch_correlation;
        if rho == 0.0 {
            return e;
        }
        let mut common_rng =
            ChaCha8Rng::seed_from_u64(mix(&[COMMON_SALT, req.nonce.stream, fnv1a(&req.prompt)]));
        let c: f64 = common_rng.sample(StandardNormal);
        let l = rho.signum() * rho.abs().sqrt();
        l * c + (1.0 - l * l).max(0.0).sqrt() * e
    }

    fn respond(&self, req: &GenerateRequest) -> (String, f64) {
        let spec = self.config.synthetic.as_ref().expect("validated");
        let sd = spec.quality_noise_sd;
        let markers = parse_markers(&req.prompt);
        let max_marker = markers
            .iter()
            .copied()
            .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
        match req.role {
            CallRole::Judge => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix(&[spec.seed, JUDGE_SALT, fnv1a(&req.prompt)]));
                let anchor = markers.last().copied().unwrap_or(spec.base_quality);
                let noise = if sd > 0.0 {
                    sd * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                let score = (anchor + noise).clamp(0.0, 1.0);
                (format!("SCORE={score}"), score)
            }
            role => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix(&[spec.seed, req.nonce.stream, req.nonce.index]));
                let z = self.latent(req, &mut rng);
                let center = match role {
                    CallRole::Synthesize | CallRole::Refine | CallRole::Decode => spec
                        .refinement_map
                        .apply(max_marker.unwrap_or(spec.base_quality)),
                    _ => spec.base_quality,
                };
                let q = round4((center + sd * z).clamp(0.0, 1.0));
                let text = match role {
                    CallRole::Parity => format!("{PARITY_MARKER}{q:.4}"),
                    CallRole::Critique => {
                        critique(max_marker.unwrap_or(q), req.nonce.index, &mut rng)
                    }
                    CallRole::Vote => vote(&markers),
                    CallRole::SelfRate => format!("{:.4}", 1.0 - q),
                    _ => format!("{QUALITY_MARKER}{q:.4}"),
                };
                (text, q)
            }
        }
    }
}

fn round4(q: f64) -> f64 {
    (q * 1e4).round() / 1e4
}

fn critique(anchor: f64, call: u64, rng: &mut ChaCha8Rng) -> String {
    if anchor >= 0.95 {
        return "[]".to_string();
    }
    let n = (5.0 * (1.0 - anchor)).ceil().max(1.0) as usize;
    let issues: Vec<serde_json::Value> = (0..n)
        .map(|k| {
            let u: f64 = rng.random();
            let severity = if u < 0.25 {
                "critical"
            } else if u < 0.60 {
                "major"
            } else {
                "minor"
            };
            serde_json::json!({
                "quote": format!("span {call}.{k}"),
                "type": "factual_error",
                "correction": format!("fix span {call}.{k}"),
                "severity": severity,
            })
        })
        .collect();
    serde_json::Value::Array(issues).to_string()
}

fn vote(markers: &[f64]) -> String {
    let labels: Vec<usize> = markers
        .iter()
        .map(|q| ((q * 5.0).floor() as usize).min(4))
        .collect();
    serde_json::to_string(&labels).expect("labels serialize")
}

fn word_count(text: &str) -> u64 {
    (text.split_whitespace().count() as u64).max(1)
}

impl Channel for SyntheticChannel {
    fn config(&self) -> &ChannelConfig {
        &self.config
    }

    fn generate(&self, req: &GenerateRequest) -> Result<AgentOutput> {
        let temperature = check_request(&self.config, req)?;
        let spec = self.config.synthetic.as_ref().expect("validated");
        let (text, q) = self.respond(req);
        let out = AgentOutput {
            prompt_tokens: word_count(&req.prompt),
            completion_tokens: word_count(&text),
            text,
            model_id: self.config.model_id.clone(),
            temperature,
            cost_usd: spec.cost_per_call,
            latency_s: 0.0,
            token_logprobs: None,
            mean_logprob: None,
        };
        Ok(if req.want_logprobs {
            out.with_logprobs(vec![q.max(1e-3).ln(); 8])
        } else {
            out
        })
    }
}
