//! Experiment configuration file (JSON).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::routing::features::{EmbeddingEndpoint, EmbeddingSource, HashEmbedder, HttpEmbedder};
use crate::routing::knn::DEFAULT_K;
use crate::technique::{TechniqueConfig, TechniqueSpec};

pub const BASELINE: &str = "baseline";

fn default_repeats() -> u32 {
    1
}

fn default_concurrency() -> usize {
    4
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    Hash {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http(EmbeddingEndpoint),
}

fn default_dim() -> usize {
    256
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hash { dim: default_dim() }
    }
}

impl EmbeddingConfig {
    pub fn build(&self) -> Result<Box<dyn EmbeddingSource>> {
        Ok(match self {
            EmbeddingConfig::Hash { dim } => Box::new(HashEmbedder::new(*dim)?),
            EmbeddingConfig::Http(settings) => Box::new(HttpEmbedder::new(settings.clone())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Oracle,
    Feasible,
    Semknn,
    Ridge,
    Logit,
    CategoryBest,
    DifficultyBins,
    FixedBestIs,
    FixedBestCv,
    Baseline,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 10] = [
        PolicyKind::Oracle,
        PolicyKind::Feasible,
        PolicyKind::Semknn,
        PolicyKind::Ridge,
        PolicyKind::Logit,
        PolicyKind::CategoryBest,
        PolicyKind::DifficultyBins,
        PolicyKind::FixedBestIs,
        PolicyKind::FixedBestCv,
        PolicyKind::Baseline,
    ];
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 38.0]
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_folds() -> usize {
    5
}

fn default_boot() -> usize {
    crate::metrics::DEFAULT_BOOTSTRAP_SAMPLES
}

fn default_level() -> f64 {
    0.95
}

fn default_l2() -> f64 {
    1.0
}

fn default_policies() -> Vec<PolicyKind> {
    PolicyKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    #[serde(default = "default_boot")]
    pub n_boot: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_l2")]
    pub ridge_l2: f64,
    #[serde(default = "default_l2")]
    pub logit_l2: f64,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::validation(
                "lambdas must be a non-empty list of non-negative values",
            ));
        }
        if self.k == 0 {
            return Err(Error::validation("k must be >= 1"));
        }
        if self.n_folds < 2 {
            return Err(Error::validation("n_folds must be >= 2"));
        }
        if self.n_boot == 0 || !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::validation(
                "n_boot must be positive and level in (0, 1)",
            ));
        }
        if !(self.ridge_l2 > 0.0 && self.logit_l2 > 0.0) {
            return Err(Error::validation("router l2 penalties must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub channels: Vec<ChannelConfig>,
    pub judge: ChannelConfig,
    pub techniques: Vec<TechniqueSpec>,
    /// Task file (JSON array or JSON lines), relative to the config file.
    pub tasks: PathBuf,
    #[serde(default = "default_repeats")]
    pub repeats: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default)]
    pub checklists: Option<PathBuf>,
    /// Channel used for pilot difficulty probes; defaults to the first.
    #[serde(default)]
    pub probe: Option<String>,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl ExperimentConfig {
    /// Reads the config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.tasks);
        resolve(&mut cfg.cache_dir);
        if let Some(c) = cfg.checklists.as_mut() {
            resolve(c);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::validation("config needs at least one channel"));
        }
        for c in self.channels.iter().chain(std::iter::once(&self.judge)) {
            c.validate()?;
        }
        if self.repeats == 0 {
            return Err(Error::validation("repeats must be >= 1"));
        }
        if self.concurrency == 0 {
            return Err(Error::validation("concurrency must be >= 1"));
        }
        let mut names = BTreeSet::new();
        for t in &self.techniques {
            t.config.validate()?;
            let name = t.name();
            if name.contains(['/', '\\']) || name.starts_with('.') {
                return Err(Error::validation(format!(
                    "technique name {name:?} is not a safe file name"
                )));
            }
            if !names.insert(name.to_string()) {
                return Err(Error::validation(format!(
                    "duplicate technique name {name}"
                )));
            }
        }
        self.evaluation.validate()
    }

    /// Configured techniques with the uncoded baseline always present.
    pub fn technique_specs(&self) -> Vec<TechniqueSpec> {
        let mut specs = self.techniques.clone();
        if !specs.iter().any(|s| s.name() == BASELINE) {
            specs.insert(
                0,
                TechniqueSpec::named(BASELINE, TechniqueConfig::baseline()),
            );
        }
        specs
    }
}
