//! OpenAI-compatible chat-completions client.

use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{
    check_request, strip_thinking, AgentOutput, Channel, ChannelConfig, GenerateRequest,
    RetryPolicy,
};
use crate::error::{Error, Result};

/// Blocking JSON POST client with bounded exponential-backoff retries.
#[derive(Debug, Clone)]
pub(crate) struct JsonClient {
    agent: ureq::Agent,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl JsonClient {
    pub(crate) fn new(timeout_s: f64, api_key_env: &str, retry: RetryPolicy) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(timeout_s.max(0.001))))
            .http_status_as_error(false)
            .build();
        Self {
            agent: config.into(),
            api_key: std::env::var(api_key_env).ok().filter(|k| !k.is_empty()),
            retry,
        }
    }

    fn attempt(&self, url: &str, body: &Value) -> Result<Value> {
        let mut request = self
            .agent
            .post(url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|e| Error::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport {
                attempts: 1,
                message: e.to_string(),
            })?;
        if !(200..300).contains(&status) {
            return Err(Error::Status { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| Error::Protocol(format!("invalid JSON body: {e}")))
    }

    pub(crate) fn post(&self, url: &str, body: &Value) -> Result<Value> {
        let mut retry = 0;
        loop {
            match self.attempt(url, body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && retry < self.retry.max_retries => {
                    let delay = self.retry.delay(retry);
                    log::warn!("{url}: {e}; retrying in {:.1}s", delay.as_secs_f64());
                    std::thread::sleep(delay);
                    retry += 1;
                }
                Err(Error::Transport { message, .. }) => {
                    return Err(Error::Transport {
                        attempts: retry + 1,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

pub(crate) fn join_url(base: &str, path: &str) -> String {
    format!(
        "{}/{}",
        base.trim_end_matches('/'),
        path.trim_start_matches('/')
    )
}

#[derive(Debug, Clone)]
pub struct HttpChannel {
    config: ChannelConfig,
    client: JsonClient,
    url: String,
}

impl HttpChannel {
    pub fn new(config: ChannelConfig) -> Result<Self> {
        config.validate()?;
        let endpoint = config
            .endpoint_url
            .clone()
            .ok_or_else(|| Error::validation("http channel needs endpoint_url"))?;
        Ok(Self {
            client: JsonClient::new(config.timeout_s, &config.api_key_env, config.retry.clone()),
            url: join_url(&endpoint, "chat/completions"),
            config,
        })
    }

    fn request_body(&self, req: &GenerateRequest, temperature: f64) -> Value {
        let mut body = json!({
            "model": self.config.model_id,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": temperature,
        });
        if req.want_logprobs {
            body["logprobs"] = json!(true);
        }
        if let Some(max_tokens) = req.max_tokens.or(self.config.max_tokens) {
            body["max_tokens"] = json!(max_tokens);
        }
        body
    }
}

fn parse_completion(v: &Value) -> Result<(String, u64, u64, Option<Vec<f64>>)> {
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| Error::Protocol("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Protocol("choice has no message content".into()))?
        .to_string();
    let usage = |key: &str| v.pointer(&format!("/usage/{key}")).and_then(Value::as_u64);
    let prompt_tokens = usage("prompt_tokens").unwrap_or(0);
    let completion_tokens = usage("completion_tokens").unwrap_or(0);
    let logprobs = choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter_map(|t| t.get("logprob").and_then(Value::as_f64))
                .collect::<Vec<f64>>()
        });
    Ok((text, prompt_tokens, completion_tokens, logprobs))
}

impl Channel for HttpChannel {
    fn config(&self) -> &ChannelConfig {
        &self.config
    }

    fn generate(&self, req: &GenerateRequest) -> Result<AgentOutput> {
        let temperature = check_request(&self.config, req)?;
        let started = Instant::now();
        let response = self
            .client
            .post(&self.url, &self.request_body(req, temperature))?;
        let latency_s = started.elapsed().as_secs_f64();
        let (raw, prompt_tokens, completion_tokens, logprobs) = parse_completion(&response)?;
        let text = strip_thinking(&raw, &self.config.thinking_markers);
        let completion_tokens = if completion_tokens == 0 && !raw.trim().is_empty() {
            1
        } else {
            completion_tokens
        };
        let cost_usd = prompt_tokens as f64 * self.config.price_per_input_token
            + completion_tokens as f64 * self.config.price_per_output_token;
        let out = AgentOutput {
            text,
            model_id: self.config.model_id.clone(),
            temperature,
            prompt_tokens,
            completion_tokens,
            cost_usd,
            latency_s,
            token_logprobs: None,
            mean_logprob: None,
        };
        if req.want_logprobs {
            match logprobs {
                Some(lp) if !lp.is_empty() => Ok(out.with_logprobs(lp)),
                _ => Err(Error::Capability(format!(
                    "{} returned no logprobs although they were requested",
                    self.config.model_id
                ))),
            }
        } else {
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_chat_completion_shape() {
        let v = json!({
            "choices": [{
                "message": {"role": "assistant", "content": "<think>x</think>hi"},
                "logprobs": {"content": [{"token": "hi", "logprob": -0.5}]}
            }],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3}
        });
        let (text, pt, ct, lp) = parse_completion(&v).unwrap();
        assert_eq!(text, "<think>x</think>hi");
        assert_eq!((pt, ct), (12, 3));
        assert_eq!(lp, Some(vec![-0.5]));
        assert!(parse_completion(&json!({"choices": []})).is_err());
    }

    #[test]
    fn joins_urls() {
        assert_eq!(
            join_url("http://h/v1/", "/chat/completions"),
            "http://h/v1/chat/completions"
        );
    }
}
