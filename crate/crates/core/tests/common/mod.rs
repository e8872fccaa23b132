#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reliacode::channel::{
    build_channel, AgentOutput, Channel, ChannelConfig, ChannelRef, GenerateRequest,
    SyntheticChannelSpec,
};
use reliacode::error::{Error, Result};
use reliacode::routing::{CacheEntry, TechniqueStats};
use reliacode::scoring::{ChecklistSet, Scorer};
use reliacode::task::{Category, Task};
use reliacode::theory::QualityMap;

pub fn synthetic(name: &str, base: f64, sd: f64, cost: f64, seed: u64) -> ChannelRef {
    synthetic_with(name, base, sd, 0.0, QualityMap::Identity, cost, seed)
}

pub fn synthetic_with(
    name: &str,
    base: f64,
    sd: f64,
    correlation: f64,
    map: QualityMap,
    cost: f64,
    seed: u64,
) -> ChannelRef {
    let mut spec = SyntheticChannelSpec::new(base, sd, cost, seed);
    spec.branch_correlation = correlation;
    spec.refinement_map = map;
    build_channel(&ChannelConfig::synthetic(name, spec)).unwrap()
}

pub fn judge(sd: f64, seed: u64) -> ChannelRef {
    synthetic("judge", 0.8, sd, 0.0005, seed)
}

pub fn scorer(judge: &ChannelRef) -> Scorer {
    Scorer::new(judge.clone(), ChecklistSet::default()).unwrap()
}

pub fn task(id: &str) -> Task {
    Task::new(
        id,
        format!("Solve task {id} carefully."),
        Category::Reasoning,
    )
}

/// Wraps a channel and counts its calls.
pub struct Counting {
    pub inner: ChannelRef,
    pub calls: AtomicUsize,
}

impl Counting {
    pub fn wrap(inner: ChannelRef) -> Arc<Counting> {
        Arc::new(Counting {
            inner,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Channel for Counting {
    fn config(&self) -> &ChannelConfig {
        self.inner.config()
    }

    fn generate(&self, req: &GenerateRequest) -> Result<AgentOutput> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(req)
    }
}

/// A channel whose every call fails with a transport error.
pub struct Broken {
    pub config: ChannelConfig,
}

impl Broken {
    pub fn new(name: &str) -> ChannelRef {
        let spec = SyntheticChannelSpec::new(0.5, 0.0, 0.001, 0);
        Arc::new(Broken {
            config: ChannelConfig::synthetic(name, spec),
        })
    }
}

impl Channel for Broken {
    fn config(&self) -> &ChannelConfig {
        &self.config
    }

    fn generate(&self, _req: &GenerateRequest) -> Result<AgentOutput> {
        Err(Error::Transport {
            attempts: 1,
            message: "connection refused".into(),
        })
    }
}

/// Techniques and their cost relative to the baseline in generated caches.
pub const CACHE_TECHNIQUES: [(&str, f64); 5] = [
    ("baseline", 1.0),
    ("diversity_sc", 4.0),
    ("diversity_mrc", 5.0),
    ("harq_ir", 3.0),
    ("turbo", 7.0),
];

fn cache_category(i: usize) -> Category {
    [Category::Qa, Category::Reasoning, Category::Code][i % 3]
}

/// Random router cache: embeddings cluster by category, quality means depend
/// on (category, technique), and every technique has a fixed cost ratio to a
/// per-task baseline cost.
pub fn random_cache(n: usize, seed: u64) -> Vec<CacheEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let centers: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let means: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            CACHE_TECHNIQUES
                .iter()
                .map(|_| rng.random_range(0.3..0.9))
                .collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            let c = i % 3;
            let embedding = centers[c]
                .iter()
                .map(|x| x + rng.random_range(-0.4..0.4))
                .collect();
            let baseline_cost = rng.random_range(0.001..0.01);
            let per_technique: BTreeMap<String, TechniqueStats> = CACHE_TECHNIQUES
                .iter()
                .zip(&means[c])
                .map(|((name, ratio), m)| {
                    let q: f64 = (m + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0);
                    (
                        name.to_string(),
                        TechniqueStats {
                            quality: q,
                            cost: ratio * baseline_cost,
                        },
                    )
                })
                .collect();
            CacheEntry {
                task_id: format!("t{i:03}"),
                embedding,
                category: cache_category(i),
                difficulty: rng.random_range(0.0..1.0),
                prompt: format!("Question {i} about topic {c}?"),
                per_technique,
                baseline_cost,
            }
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Brute-force neighborhood means, written independently of the library.
pub fn oracle_means(cache: &[CacheEntry], query: usize, k: usize) -> BTreeMap<String, (f64, f64)> {
    let mut d: Vec<(f64, usize)> = cache
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != query)
        .map(|(i, e)| (cosine(&cache[query].embedding, &e.embedding), i))
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let nn = &d[..k.min(d.len())];
    let mut out = BTreeMap::new();
    for (name, _) in CACHE_TECHNIQUES {
        let q = nn
            .iter()
            .map(|&(_, i)| cache[i].per_technique[name].quality)
            .sum::<f64>()
            / nn.len() as f64;
        let c = nn
            .iter()
            .map(|&(_, i)| cache[i].normalized_cost(name).unwrap())
            .sum::<f64>()
            / nn.len() as f64;
        out.insert(name.to_string(), (q, c));
    }
    out
}

/// Two-sided exact p by enumerating every sign assignment of the ranks.
pub fn brute_force_p(diffs: &[f64]) -> f64 {
    let d: Vec<f64> = diffs.iter().copied().filter(|x| *x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let mut ranks = vec![0.0; n];
    for i in 0..n {
        let less = d.iter().filter(|x| x.abs() < d[i].abs()).count() as f64;
        let equal = d.iter().filter(|x| x.abs() == d[i].abs()).count() as f64;
        ranks[i] = less + (equal + 1.0) / 2.0;
    }
    let observed: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| ranks[i]).sum();
    let (mut lo, mut hi) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        let w: f64 = (0..n)
            .filter(|&i| mask >> i & 1 == 1)
            .map(|i| ranks[i])
            .sum();
        if w <= observed + 1e-9 {
            lo += 1;
        }
        if w >= observed - 1e-9 {
            hi += 1;
        }
    }
    let total = (1u64 << n) as f64;
    (2.0 * lo.min(hi) as f64 / total).min(1.0)
}
