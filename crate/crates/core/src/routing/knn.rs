//! Cost-aware nearest-neighbor dispatch over a cache of per-task outcomes.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::Category;

pub const DEFAULT_K: usize = 20;
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TechniqueStats {
    pub quality: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub task_id: String,
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub category: Category,
    #[serde(default)]
    pub difficulty: f64,
    #[serde(default)]
    pub prompt: String,
    pub per_technique: BTreeMap<String, TechniqueStats>,
    pub baseline_cost: f64,
}

impl CacheEntry {
    pub fn validate(&self) -> Result<()> {
        if self.per_technique.is_empty() {
            return Err(Error::validation(format!(
                "cache entry {} has no techniques",
                self.task_id
            )));
        }
        if !(self.baseline_cost > 0.0 && self.baseline_cost.is_finite()) {
            return Err(Error::validation(format!(
                "cache entry {} needs a positive baseline cost",
                self.task_id
            )));
        }
        Ok(())
    }

    /// Cost of technique `name` relative to this task's baseline cost.
    pub fn normalized_cost(&self, name: &str) -> Option<f64> {
        self.per_technique
            .get(name)
            .map(|s| s.cost / self.baseline_cost)
    }

    /// The technique with the highest mean quality; ties go to the cheaper.
    pub fn best_technique(&self) -> &str {
        let mut best: Option<(&String, &TechniqueStats)> = None;
        for (name, s) in &self.per_technique {
            best = match best {
                None => Some((name, s)),
                Some((bn, bs)) => {
                    if s.quality > bs.quality + TIE_EPS
                        || ((s.quality - bs.quality).abs() <= TIE_EPS && s.cost < bs.cost)
                    {
                        Some((name, s))
                    } else {
                        Some((bn, bs))
                    }
                }
            };
        }
        best.map(|(n, _)| n.as_str()).unwrap_or("")
    }
}

pub fn validate_cache(cache: &[CacheEntry]) -> Result<usize> {
    let first = cache
        .first()
        .ok_or_else(|| Error::validation("cache is empty"))?;
    let dim = first.embedding.len();
    for e in cache {
        e.validate()?;
        if e.embedding.len() != dim {
            return Err(Error::validation(format!(
                "cache entry {} has embedding dimension {}, expected {dim}",
                e.task_id,
                e.embedding.len()
            )));
        }
    }
    Ok(dim)
}

pub fn load_cache(path: &Path) -> Result<Vec<CacheEntry>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    validate_cache(&out)?;
    Ok(out)
}

pub fn save_cache(path: &Path, cache: &[CacheEntry]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in cache {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Neighbor-mean estimate for one candidate technique.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub technique: String,
    pub quality: f64,
    pub normalized_cost: f64,
}

/// Per-technique neighbor means over the `k` nearest entries, skipping the
/// entry named `exclude`.
pub fn neighbor_estimates(
    cache: &[CacheEntry],
    embedding: &[f64],
    k: usize,
    exclude: Option<&str>,
) -> Result<Vec<Candidate>> {
    if k == 0 {
        return Err(Error::validation("k must be >= 1"));
    }
    let dim = validate_cache(cache)?;
    if embedding.len() != dim {
        return Err(Error::validation(format!(
            "query embedding has dimension {}, cache has {dim}",
            embedding.len()
        )));
    }
    let mut ranked: Vec<(f64, usize)> = cache
        .iter()
        .enumerate()
        .filter(|(_, e)| Some(e.task_id.as_str()) != exclude)
        .map(|(i, e)| (cosine_distance(embedding, &e.embedding), i))
        .collect();
    if ranked.is_empty() {
        return Err(Error::validation("no cache entries left after exclusion"));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.truncate(k);
    let mut sums: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for &(_, i) in &ranked {
        let e = &cache[i];
        for (name, s) in &e.per_technique {
            let slot = sums.entry(name.as_str()).or_insert((0.0, 0.0, 0));
            slot.0 += s.quality;
            slot.1 += s.cost / e.baseline_cost;
            slot.2 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(name, (q, c, n))| Candidate {
            technique: name.to_string(),
            quality: q / n as f64,
            normalized_cost: c / n as f64,
        })
        .collect())
}

/// Argmax of `quality - lambda * normalized_cost`; ties go to the cheaper
/// candidate, then to the lexicographically first name.
pub fn choose(candidates: &[Candidate], lambda: f64) -> Option<&Candidate> {
    let objective = |c: &Candidate| {
        if lambda == 0.0 {
            c.quality
        } else {
            c.quality - lambda * c.normalized_cost
        }
    };
    let scale = |v: f64| TIE_EPS * (1.0 + v.abs());
    let mut best: Option<&Candidate> = None;
    for c in candidates {
        best = match best {
            None => Some(c),
            Some(b) => {
                let (oc, ob) = (objective(c), objective(b));
                if oc > ob + scale(ob)
                    || ((oc - ob).abs() <= scale(ob) && c.normalized_cost < b.normalized_cost)
                {
                    Some(c)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

pub fn semknn_dispatch(
    cache: &[CacheEntry],
    embedding: &[f64],
    lambda: f64,
    k: usize,
) -> Result<String> {
    semknn_dispatch_excluding(cache, embedding, lambda, k, None)
}

pub fn semknn_dispatch_excluding(
    cache: &[CacheEntry],
    embedding: &[f64],
    lambda: f64,
    k: usize,
    exclude: Option<&str>,
) -> Result<String> {
    if !(lambda >= 0.0) {
        return Err(Error::validation("lambda must be non-negative"));
    }
    let candidates = neighbor_estimates(cache, embedding, k, exclude)?;
    Ok(choose(&candidates, lambda)
        .expect("non-empty per_technique")
        .technique
        .clone())
}

/// One row of a λ sweep: realized means over the evaluated tasks plus the
/// mean neighbor-estimated cost the dispatcher optimized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub mean_quality: f64,
    pub mean_cost: f64,
    pub mean_normalized_cost: f64,
    pub mean_estimated_cost: f64,
    pub picks: Vec<String>,
}

/// Dispatches every task in `tasks` against `train` for each λ. With
/// `leave_one_out`, a task never sees its own cache entry.
pub fn lambda_sweep(
    train: &[CacheEntry],
    tasks: &[CacheEntry],
    lambdas: &[f64],
    k: usize,
    leave_one_out: bool,
) -> Result<Vec<SweepPoint>> {
    if lambdas.is_empty() {
        return Err(Error::validation("lambda list is empty"));
    }
    if tasks.is_empty() {
        return Err(Error::validation("task set is empty"));
    }
    let estimates: Vec<Vec<Candidate>> = tasks
        .iter()
        .map(|t| {
            let exclude = leave_one_out.then_some(t.task_id.as_str());
            neighbor_estimates(train, &t.embedding, k, exclude)
        })
        .collect::<Result<_>>()?;
    let n = tasks.len() as f64;
    lambdas
        .iter()
        .map(|&lambda| {
            if !(lambda >= 0.0) {
                return Err(Error::validation("lambda must be non-negative"));
            }
            let mut q = 0.0;
            let mut c = 0.0;
            let mut nc = 0.0;
            let mut est = 0.0;
            let mut picks = Vec::with_capacity(tasks.len());
            for (t, cands) in tasks.iter().zip(&estimates) {
                let pick = choose(cands, lambda).expect("non-empty candidates");
                let realized = t.per_technique.get(&pick.technique).ok_or_else(|| {
                    Error::validation(format!(
                        "task {} has no outcome for {}",
                        t.task_id, pick.technique
                    ))
                })?;
                q += realized.quality;
                c += realized.cost;
                nc += realized.cost / t.baseline_cost;
                est += pick.normalized_cost;
                picks.push(pick.technique.clone());
            }
            Ok(SweepPoint {
                lambda,
                mean_quality: q / n,
                mean_cost: c / n,
                mean_normalized_cost: nc / n,
                mean_estimated_cost: est / n,
                picks,
            })
        })
        .collect()
}

/// λ large enough that any cost difference outweighs the quality range.
pub const COST_EXTREME_LAMBDA: f64 = 1e9;

/// Leave-one-out in-sample ceiling of the same router class: the λ with the
/// highest mean quality over the full cache. The grid always contains the
/// quality-only and cost-extreme ends.
pub fn feasible_quality(cache: &[CacheEntry], lambdas: &[f64], k: usize) -> Result<SweepPoint> {
    let mut grid = lambdas.to_vec();
    for end in [0.0, COST_EXTREME_LAMBDA] {
        if !grid.contains(&end) {
            grid.push(end);
        }
    }
    let rows = lambda_sweep(cache, cache, &grid, k, true)?;
    Ok(rows
        .into_iter()
        .reduce(|a, b| {
            if b.mean_quality > a.mean_quality {
                b
            } else {
                a
            }
        })
        .expect("non-empty lambdas"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, emb: Vec<f64>, techs: &[(&str, f64, f64)]) -> CacheEntry {
        CacheEntry {
            task_id: id.into(),
            embedding: emb,
            category: Category::Qa,
            difficulty: 0.5,
            prompt: String::new(),
            per_technique: techs
                .iter()
                .map(|(n, q, c)| {
                    (
                        n.to_string(),
                        TechniqueStats {
                            quality: *q,
                            cost: *c,
                        },
                    )
                })
                .collect(),
            baseline_cost: 1.0,
        }
    }

    #[test]
    fn lambda_extremes() {
        let cache = vec![
            entry(
                "a",
                vec![1.0, 0.0],
                &[("cheap", 0.5, 1.0), ("rich", 0.9, 5.0)],
            ),
            entry(
                "b",
                vec![0.9, 0.1],
                &[("cheap", 0.6, 1.0), ("rich", 0.8, 5.0)],
            ),
        ];
        assert_eq!(
            semknn_dispatch(&cache, &[1.0, 0.0], 0.0, 20).unwrap(),
            "rich"
        );
        assert_eq!(
            semknn_dispatch(&cache, &[1.0, 0.0], 1e9, 20).unwrap(),
            "cheap"
        );
        assert!(semknn_dispatch(&cache, &[1.0], 0.0, 20).is_err());
    }

    #[test]
    fn ties_prefer_cheaper() {
        let cache = vec![entry(
            "a",
            vec![1.0],
            &[("b_exp", 0.7, 3.0), ("a_cheap", 0.7, 1.0)],
        )];
        assert_eq!(semknn_dispatch(&cache, &[1.0], 0.0, 1).unwrap(), "a_cheap");
    }

    #[test]
    fn nearest_neighbor_decides() {
        let cache = vec![
            entry("x", vec![1.0, 0.0], &[("p", 0.9, 1.0), ("q", 0.1, 1.0)]),
            entry("y", vec![0.0, 1.0], &[("p", 0.1, 1.0), ("q", 0.9, 1.0)]),
        ];
        assert_eq!(semknn_dispatch(&cache, &[0.9, 0.1], 0.0, 1).unwrap(), "p");
        assert_eq!(semknn_dispatch(&cache, &[0.1, 0.9], 0.0, 1).unwrap(), "q");
        assert_eq!(
            semknn_dispatch_excluding(&cache, &[0.9, 0.1], 0.0, 1, Some("x")).unwrap(),
            "q"
        );
    }
}
