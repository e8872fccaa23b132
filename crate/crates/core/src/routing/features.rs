//! Task features for the learned routers and task embeddings for the
//! nearest-neighbor router.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::channel::http::{join_url, JsonClient};
use crate::channel::RetryPolicy;
use crate::error::{Error, Result};
use crate::seed::fnv1a;
use crate::task::Category;

/// `[1, d, 1_cat...]`.
pub fn basic_feature_names() -> Vec<String> {
    let mut names = vec!["intercept".to_string(), "difficulty".to_string()];
    names.extend(Category::ALL.iter().map(|c| format!("cat_{}", c.as_str())));
    names
}

pub fn basic_features(difficulty: f64, category: Category) -> Vec<f64> {
    let mut f = vec![1.0, difficulty];
    f.extend(
        Category::ALL
            .iter()
            .map(|c| if *c == category { 1.0 } else { 0.0 }),
    );
    f
}

pub fn extended_feature_names() -> Vec<String> {
    let mut names = basic_feature_names();
    for n in [
        "log_words",
        "has_code",
        "has_math",
        "has_numbers",
        "has_question",
        "log_sentences",
        "mean_word_len",
    ] {
        names.push(n.to_string());
    }
    names
}

/// Basic features plus surface statistics of the prompt.
pub fn extended_features(difficulty: f64, category: Category, prompt: &str) -> Vec<f64> {
    let mut f = basic_features(difficulty, category);
    let words: Vec<&str> = prompt.split_whitespace().collect();
    let has_code = prompt.contains("```")
        || ["def ", "return ", "fn ", "class ", "import ", "{", "};"]
            .iter()
            .any(|m| prompt.contains(m));
    let has_math = prompt.chars().any(|c| "=+*/^√∑∫<>".contains(c))
        || ["\\frac", "$"].iter().any(|m| prompt.contains(m));
    let has_numbers = prompt.chars().any(|c| c.is_ascii_digit());
    let has_question = prompt.contains('?');
    let sentences = prompt
        .split(['.', '!', '?', '\n'])
        .filter(|s| !s.trim().is_empty())
        .count();
    let mean_len = if words.is_empty() {
        0.0
    } else {
        words.iter().map(|w| w.chars().count()).sum::<usize>() as f64 / words.len() as f64
    };
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    f.extend([
        (1.0 + words.len() as f64).ln(),
        flag(has_code),
        flag(has_math),
        flag(has_numbers),
        flag(has_question),
        (1.0 + sentences as f64).ln(),
        mean_len,
    ]);
    f
}

pub trait EmbeddingSource: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Deterministic signed feature hashing of word unigrams and bigrams,
/// L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("embedding dimension must be positive"));
        }
        Ok(Self { dim })
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut v = vec![0.0; self.dim];
        let mut add = |key: &str, w: f64| {
            let h = fnv1a(key);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign * w;
        };
        for t in &tokens {
            add(t, 1.0);
        }
        for pair in tokens.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]), 0.5);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingSource for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed_text(text))
    }
}

/// Settings for an OpenAI-compatible `/embeddings` endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEndpoint {
    pub endpoint_url: String,
    pub model_id: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}

fn default_timeout() -> f64 {
    60.0
}

pub struct HttpEmbedder {
    settings: EmbeddingEndpoint,
    client: JsonClient,
}

impl HttpEmbedder {
    pub fn new(settings: EmbeddingEndpoint) -> Self {
        let client = JsonClient::new(
            settings.timeout_s,
            &settings.api_key_env,
            RetryPolicy::default(),
        );
        Self { settings, client }
    }
}

impl EmbeddingSource for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let url = join_url(&self.settings.endpoint_url, "embeddings");
        let body = json!({"model": self.settings.model_id, "input": text});
        let v = self.client.post(&url, &body)?;
        let arr = v
            .pointer("/data/0/embedding")
            .and_then(|e| e.as_array())
            .ok_or_else(|| Error::Protocol("embedding response lacks data[0].embedding".into()))?;
        arr.iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| Error::Protocol("non-numeric embedding component".into()))
            })
            .collect()
    }
}
