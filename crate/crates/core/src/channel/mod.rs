//! Stochastic text channels.
//!
//! A channel turns a prompt into one [`AgentOutput`]. Two backends share the
//! [`Channel`] trait: an OpenAI-compatible HTTP client and a deterministic
//! synthetic simulator whose outputs carry their drawn quality.

pub(crate) mod http;
mod synthetic;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::theory::QualityMap;

pub use http::HttpChannel;
pub use synthetic::{parse_markers, SyntheticChannel, PARITY_MARKER, QUALITY_MARKER};

/// One channel use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOutput {
    pub text: String,
    pub model_id: String,
    pub temperature: f64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_usd: f64,
    pub latency_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_logprob: Option<f64>,
}

impl AgentOutput {
    /// Attaches per-token logprobs and their arithmetic mean.
    pub fn with_logprobs(mut self, logprobs: Vec<f64>) -> Self {
        self.mean_logprob = mean(&logprobs);
        self.token_logprobs = Some(logprobs);
        self
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Geometric-mean per-token probability, `exp(mean logprob)`.
pub fn intrinsic_confidence(out: &AgentOutput) -> Result<f64> {
    match out.token_logprobs.as_deref() {
        Some(lp) if !lp.is_empty() => Ok(mean(lp).unwrap_or(0.0).min(0.0).exp()),
        _ => Err(Error::Capability(format!(
            "output from {} carries no token logprobs",
            out.model_id
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Http,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Delay before retry `k` (0-based) is `base_delay_s * 2^k`.
    pub base_delay_s: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_s: 1.0,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        Duration::from_secs_f64(self.base_delay_s * 2f64.powi(retry as i32))
    }
}

/// Parameters of the synthetic channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticChannelSpec {
    pub base_quality: f64,
    #[serde(default)]
    pub quality_noise_sd: f64,
    #[serde(default)]
    pub branch_correlation: f64,
    #[serde(default)]
    pub refinement_map: QualityMap,
    pub cost_per_call: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticChannelSpec {
    pub fn new(base_quality: f64, quality_noise_sd: f64, cost_per_call: f64, seed: u64) -> Self {
        Self {
            base_quality,
            quality_noise_sd,
            branch_correlation: 0.0,
            refinement_map: QualityMap::Identity,
            cost_per_call,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.base_quality) {
            return Err(Error::validation("base_quality must lie in [0, 1]"));
        }
        if !(self.quality_noise_sd >= 0.0 && self.quality_noise_sd.is_finite()) {
            return Err(Error::validation("quality_noise_sd must be non-negative"));
        }
        if !(-1.0..=1.0).contains(&self.branch_correlation) {
            return Err(Error::validation("branch_correlation must lie in [-1, 1]"));
        }
        if !(self.cost_per_call > 0.0 && self.cost_per_call.is_finite()) {
            return Err(Error::validation("cost_per_call must be positive"));
        }
        self.refinement_map.validate()
    }
}

fn default_temperature() -> f64 {
    0.7
}

fn default_timeout() -> f64 {
    120.0
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}

fn default_thinking_markers() -> Vec<(String, String)> {
    vec![("<think>".to_string(), "</think>".to_string())]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Handle used in configs and records; defaults to `model_id`.
    #[serde(default)]
    pub name: String,
    pub backend: Backend,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    pub model_id: String,
    #[serde(default = "default_temperature")]
    pub default_temperature: f64,
    #[serde(default)]
    pub price_per_input_token: f64,
    #[serde(default)]
    pub price_per_output_token: f64,
    #[serde(default)]
    pub supports_logprobs: bool,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    /// `(open, close)` pairs whose spans are removed from returned text.
    #[serde(default = "default_thinking_markers")]
    pub thinking_markers: Vec<(String, String)>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub synthetic: Option<SyntheticChannelSpec>,
}

impl ChannelConfig {
    pub fn synthetic(model_id: impl Into<String>, spec: SyntheticChannelSpec) -> Self {
        let model_id = model_id.into();
        Self {
            name: model_id.clone(),
            backend: Backend::Synthetic,
            endpoint_url: None,
            api_key_env: default_api_key_env(),
            model_id,
            default_temperature: default_temperature(),
            price_per_input_token: 0.0,
            price_per_output_token: 0.0,
            supports_logprobs: true,
            max_tokens: None,
            timeout_s: default_timeout(),
            thinking_markers: default_thinking_markers(),
            retry: RetryPolicy::default(),
            synthetic: Some(spec),
        }
    }

    pub fn http(model_id: impl Into<String>, endpoint_url: impl Into<String>) -> Self {
        let model_id = model_id.into();
        Self {
            name: model_id.clone(),
            backend: Backend::Http,
            endpoint_url: Some(endpoint_url.into()),
            api_key_env: default_api_key_env(),
            model_id,
            default_temperature: default_temperature(),
            price_per_input_token: 0.0,
            price_per_output_token: 0.0,
            supports_logprobs: false,
            max_tokens: None,
            timeout_s: default_timeout(),
            thinking_markers: default_thinking_markers(),
            retry: RetryPolicy::default(),
            synthetic: None,
        }
    }

    pub fn display_name(&self) -> &str {
        if self.name.is_empty() {
            &self.model_id
        } else {
            &self.name
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_id.is_empty() {
            return Err(Error::validation("model_id must be non-empty"));
        }
        if !(self.default_temperature >= 0.0) {
            return Err(Error::validation("default_temperature must be >= 0"));
        }
        if self.price_per_input_token < 0.0 || self.price_per_output_token < 0.0 {
            return Err(Error::validation("token prices must be non-negative"));
        }
        match self.backend {
            Backend::Http if self.endpoint_url.as_deref().is_none_or(str::is_empty) => Err(
                Error::validation(format!("http channel {} needs endpoint_url", self.model_id)),
            ),
            Backend::Synthetic => match &self.synthetic {
                Some(spec) => spec.validate(),
                None => Err(Error::validation(format!(
                    "synthetic channel {} needs a synthetic spec",
                    self.model_id
                ))),
            },
            Backend::Http => Ok(()),
        }
    }
}

/// What a call is for. Real endpoints ignore it; the synthetic backend uses
/// it to decide how to respond.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallRole {
    Generate,
    Synthesize,
    Critique,
    Refine,
    Vote,
    Parity,
    Decode,
    Judge,
    Probe,
    SelfRate,
}

/// Addresses one call within a run: `stream` identifies the run, `index`
/// the call within it. The synthetic backend derives its randomness from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Nonce {
    pub stream: u64,
    pub index: u64,
}

impl Nonce {
    pub fn new(stream: u64, index: u64) -> Self {
        Self { stream, index }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub prompt: String,
    pub temperature: Option<f64>,
    pub want_logprobs: bool,
    pub max_tokens: Option<u32>,
    pub role: CallRole,
    pub nonce: Nonce,
}

impl GenerateRequest {
    pub fn new(prompt: impl Into<String>, role: CallRole, nonce: Nonce) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: None,
            want_logprobs: false,
            max_tokens: None,
            role,
            nonce,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = Some(t);
        self
    }

    pub fn logprobs(mut self, want: bool) -> Self {
        self.want_logprobs = want;
        self
    }
}

pub trait Channel: Send + Sync {
    fn config(&self) -> &ChannelConfig;

    /// Performs one channel use. Implementations call [`check_request`]
    /// before doing any work.
    fn generate(&self, req: &GenerateRequest) -> Result<AgentOutput>;
}

pub type ChannelRef = Arc<dyn Channel>;

/// Preconditions shared by every backend.
pub fn check_request(config: &ChannelConfig, req: &GenerateRequest) -> Result<f64> {
    if req.prompt.trim().is_empty() {
        return Err(Error::validation("prompt must be non-empty"));
    }
    let temperature = req.temperature.unwrap_or(config.default_temperature);
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::validation("temperature must be >= 0"));
    }
    if req.want_logprobs && !config.supports_logprobs {
        return Err(Error::Capability(format!(
            "channel {} does not expose logprobs",
            config.display_name()
        )));
    }
    Ok(temperature)
}

pub fn build_channel(config: &ChannelConfig) -> Result<ChannelRef> {
    config.validate()?;
    Ok(match config.backend {
        Backend::Http => Arc::new(HttpChannel::new(config.clone())?),
        Backend::Synthetic => Arc::new(SyntheticChannel::new(config.clone())?),
    })
}

/// Removes every `open ... close` span. An unterminated opening marker
/// drops the rest of the text.
pub fn strip_thinking(text: &str, markers: &[(String, String)]) -> String {
    let mut out = text.to_string();
    for (open, close) in markers {
        if open.is_empty() {
            continue;
        }
        let mut result = String::with_capacity(out.len());
        let mut rest = out.as_str();
        while let Some(start) = rest.find(open.as_str()) {
            result.push_str(&rest[..start]);
            let after = &rest[start + open.len()..];
            match after.find(close.as_str()) {
                Some(end) if !close.is_empty() => rest = &after[end + close.len()..],
                _ => {
                    rest = "";
                    break;
                }
            }
        }
        result.push_str(rest);
        out = result;
    }
    out.trim().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn output(logprobs: Option<Vec<f64>>) -> AgentOutput {
        let base = AgentOutput {
            text: "x".into(),
            model_id: "m".into(),
            temperature: 0.0,
            prompt_tokens: 1,
            completion_tokens: 1,
            cost_usd: 0.0,
            latency_s: 0.0,
            token_logprobs: None,
            mean_logprob: None,
        };
        match logprobs {
            Some(lp) => base.with_logprobs(lp),
            None => base,
        }
    }

    #[test]
    fn mean_logprob_is_arithmetic_mean() {
        let out = output(Some(vec![-0.1, -0.2, -0.3]));
        assert!((out.mean_logprob.unwrap() + 0.2).abs() < 1e-12);
    }

    #[test]
    fn intrinsic_confidence_examples() {
        assert_eq!(
            intrinsic_confidence(&output(Some(vec![0.0; 4]))).unwrap(),
            1.0
        );
        let c = intrinsic_confidence(&output(Some(vec![-0.1, -0.2, -0.3]))).unwrap();
        assert!((c - (-0.2f64).exp()).abs() < 1e-12);
        assert!((c - 0.8187).abs() < 1e-4);
        let c = intrinsic_confidence(&output(Some(vec![-1.0]))).unwrap();
        assert!((c - 0.3679).abs() < 1e-4);
        assert!(matches!(
            intrinsic_confidence(&output(None)),
            Err(Error::Capability(_))
        ));
        assert!(intrinsic_confidence(&output(Some(vec![]))).is_err());
    }

    #[test]
    fn thinking_blocks_are_stripped() {
        let m = default_thinking_markers();
        assert_eq!(strip_thinking("<think>plan</think>Answer", &m), "Answer");
        assert_eq!(
            strip_thinking("A<think>x</think> B <think>y</think>C", &m),
            "A B C"
        );
        assert_eq!(strip_thinking("A <think>never closed", &m), "A");
        let extra = vec![("[[r]]".to_string(), "[[/r]]".to_string())];
        assert_eq!(strip_thinking("[[r]]hidden[[/r]]shown", &extra), "shown");
    }

    #[test]
    fn config_validation() {
        let mut http = ChannelConfig::http("m", "http://localhost:1");
        assert!(http.validate().is_ok());
        http.endpoint_url = None;
        assert!(http.validate().is_err());
        let syn = ChannelConfig::synthetic("s", SyntheticChannelSpec::new(0.5, 0.1, 0.001, 1));
        assert!(syn.validate().is_ok());
        let mut bad = syn.clone();
        bad.synthetic.as_mut().unwrap().base_quality = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn retry_delays_double() {
        let r = RetryPolicy::default();
        let delays: Vec<f64> = (0..3).map(|k| r.delay(k).as_secs_f64()).collect();
        assert_eq!(delays, vec![1.0, 2.0, 4.0]);
    }
}
