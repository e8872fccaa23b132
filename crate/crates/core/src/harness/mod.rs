//! Experiment runner, run-record cache, router-cache construction and
//! cross-validated policy evaluation.

pub mod config;
pub mod evaluate;
pub mod export;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{build_channel, ChannelRef};
use crate::error::{Error, Result};
use crate::record::{RunContext, RunRecord};
use crate::routing::features::EmbeddingSource;
use crate::routing::knn::{CacheEntry, TechniqueStats};
use crate::routing::{pilot_difficulty, DifficultySource};
use crate::scoring::{ChecklistSet, Scorer};
use crate::task::{load_tasks, Category, Task};
use crate::technique::{ChannelPool, TechniqueSpec};

pub use config::{EmbeddingConfig, EvaluationConfig, ExperimentConfig, PolicyKind, BASELINE};
pub use evaluate::{evaluate_policies, write_policy_table, PolicyRow, PolicyTable};

pub const PILOT_FILE: &str = "pilot.json";
pub const ROUTER_CACHE_FILE: &str = "router_cache.jsonl";
const PILOT_REPEAT: u32 = u32::MAX;

/// Everything needed to execute runs: channels, judge-backed scorer, tasks.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub pool: ChannelPool,
    pub scorer: Scorer,
    pub tasks: Vec<Task>,
}

impl Experiment {
    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        let channels: Vec<ChannelRef> = config
            .channels
            .iter()
            .map(build_channel)
            .collect::<Result<_>>()?;
        let judge = build_channel(&config.judge)?;
        let checklists = match &config.checklists {
            Some(p) => ChecklistSet::load(p)?,
            None => ChecklistSet::default(),
        };
        let tasks = load_tasks(&config.tasks)?;
        let scorer = Scorer::new(judge.clone(), checklists)?;
        Ok(Self {
            pool: ChannelPool::new(channels, judge)?,
            scorer,
            tasks,
            config,
        })
    }

    pub fn cache_file(&self, technique: &str) -> PathBuf {
        technique_cache_path(&self.config.cache_dir, technique)
    }
}

pub fn technique_cache_path(cache_dir: &Path, technique: &str) -> PathBuf {
    cache_dir.join(format!("{technique}.json"))
}

pub fn load_records(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    write_atomic(path, &serde_json::to_string_pretty(records)?)
}

/// Every per-technique cache file in a directory, keyed by technique name.
pub fn load_cache_dir(
    cache_dir: &Path,
    techniques: &[String],
) -> Result<BTreeMap<String, Vec<RunRecord>>> {
    let mut out = BTreeMap::new();
    for t in techniques {
        let path = technique_cache_path(cache_dir, t);
        if path.exists() {
            out.insert(t.clone(), load_records(&path)?);
        } else {
            log::warn!("no cache file for technique {t}");
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotRecord {
    pub difficulty: f64,
    pub source: DifficultySource,
    pub cost: f64,
}

pub fn load_pilot(cache_dir: &Path) -> Result<BTreeMap<String, PilotRecord>> {
    let path = cache_dir.join(PILOT_FILE);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub new_records: usize,
    pub skipped: usize,
    pub failed: usize,
    pub new_pilots: usize,
}

/// Runs every missing `(task, technique, repeat)` triple and the pilot probe
/// for every task lacking one. Existing records are never recomputed.
pub fn run_experiment(exp: &Experiment) -> Result<RunSummary> {
    let cfg = &exp.config;
    std::fs::create_dir_all(&cfg.cache_dir)?;
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency)
        .build()
        .map_err(|e| Error::validation(format!("cannot build worker pool: {e}")))?;
    let mut summary = RunSummary::default();
    let task_order: BTreeMap<&str, usize> = exp
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| (t.id.as_str(), i))
        .collect();

    let probe = match &cfg.probe {
        Some(name) => exp
            .pool
            .find(name)
            .ok_or_else(|| Error::validation(format!("unknown probe channel {name:?}")))?,
        None => exp.pool.first().clone(),
    };
    let mut pilots = load_pilot(&cfg.cache_dir)?;
    let missing: Vec<&Task> = exp
        .tasks
        .iter()
        .filter(|t| !pilots.contains_key(&t.id))
        .collect();
    if !missing.is_empty() {
        let fresh: Vec<(String, PilotRecord)> = threads.install(|| {
            missing
                .par_iter()
                .map(|task| {
                    let ctx = RunContext::new(task, &exp.scorer, cfg.seed, PILOT_REPEAT);
                    let est = pilot_difficulty(&probe, &ctx);
                    let cost = est.outputs.iter().map(|o| o.cost_usd).sum();
                    (
                        task.id.clone(),
                        PilotRecord {
                            difficulty: est.difficulty,
                            source: est.source,
                            cost,
                        },
                    )
                })
                .collect()
        });
        summary.new_pilots = fresh.len();
        pilots.extend(fresh);
        write_atomic(
            &cfg.cache_dir.join(PILOT_FILE),
            &serde_json::to_string_pretty(&pilots)?,
        )?;
    }

    for spec in cfg.technique_specs() {
        let path = exp.cache_file(spec.name());
        let mut records = load_records(&path)?;
        let done: BTreeSet<(String, u32)> = records
            .iter()
            .map(|r| (r.task_id.clone(), r.repeat_index))
            .collect();
        let jobs: Vec<(&Task, u32)> = exp
            .tasks
            .iter()
            .flat_map(|t| (0..cfg.repeats).map(move |r| (t, r)))
            .filter(|(t, r)| !done.contains(&(t.id.clone(), *r)))
            .collect();
        summary.skipped += exp.tasks.len() * cfg.repeats as usize - jobs.len();
        if jobs.is_empty() {
            continue;
        }
        log::info!("{}: running {} jobs", spec.name(), jobs.len());
        let fresh: Vec<RunRecord> = threads.install(|| {
            jobs.par_iter()
                .map(|(task, repeat)| run_one(&spec, exp, task, *repeat))
                .collect()
        });
        summary.new_records += fresh.len();
        summary.failed += fresh.iter().filter(|r| r.error.is_some()).count();
        records.extend(fresh);
        records.sort_by_key(|r| {
            (
                task_order
                    .get(r.task_id.as_str())
                    .copied()
                    .unwrap_or(usize::MAX),
                r.repeat_index,
            )
        });
        save_records(&path, &records)?;
    }
    Ok(summary)
}

fn run_one(spec: &TechniqueSpec, exp: &Experiment, task: &Task, repeat: u32) -> RunRecord {
    let ctx = RunContext::new(task, &exp.scorer, exp.config.seed, repeat);
    spec.run(&exp.pool, &ctx).unwrap_or_else(|e| {
        log::warn!("{} failed on {} repeat {repeat}: {e}", spec.name(), task.id);
        RunRecord::failed(&ctx, spec.name(), e.to_string())
    })
}

/// Per-task repeat values of one technique.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RepeatValues {
    pub quality: Vec<f64>,
    pub cost: Vec<f64>,
}

/// The router cache plus the per-repeat values behind its means.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalData {
    pub entries: Vec<CacheEntry>,
    pub repeats: BTreeMap<(String, String), RepeatValues>,
}

impl EvalData {
    pub fn repeat_quality(&self, task_id: &str, technique: &str) -> Vec<f64> {
        self.repeats
            .get(&(task_id.to_string(), technique.to_string()))
            .map(|r| r.quality.clone())
            .unwrap_or_default()
    }
}

/// Aggregates repeats into per-technique means and attaches embeddings and
/// pilot difficulties. Tasks without a baseline or an embedding are left out.
pub fn build_router_cache(
    records: &BTreeMap<String, Vec<RunRecord>>,
    tasks: &[Task],
    pilots: &BTreeMap<String, PilotRecord>,
    embedder: &dyn EmbeddingSource,
) -> Result<EvalData> {
    let mut repeats: BTreeMap<(String, String), RepeatValues> = BTreeMap::new();
    for (technique, recs) in records {
        for r in recs {
            let slot = repeats
                .entry((r.task_id.clone(), technique.clone()))
                .or_default();
            slot.quality.push(r.final_quality);
            slot.cost.push(r.total_cost);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut entries = Vec::new();
    for task in tasks {
        let mut per_technique = BTreeMap::new();
        for technique in records.keys() {
            if let Some(v) = repeats.get(&(task.id.clone(), technique.clone())) {
                per_technique.insert(
                    technique.clone(),
                    TechniqueStats {
                        quality: mean(&v.quality),
                        cost: mean(&v.cost),
                    },
                );
            }
        }
        let Some(baseline_cost) = per_technique.get(BASELINE).map(|s| s.cost) else {
            log::warn!("task {} has no baseline record; excluded", task.id);
            continue;
        };
        if !(baseline_cost > 0.0) {
            log::warn!("task {} has zero baseline cost; excluded", task.id);
            continue;
        }
        let embedding = match embedder.embed(&task.prompt) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("embedding failed for {}: {e}; excluded", task.id);
                continue;
            }
        };
        entries.push(CacheEntry {
            task_id: task.id.clone(),
            embedding,
            category: task.category,
            difficulty: pilots.get(&task.id).map_or(1.0, |p| p.difficulty),
            prompt: task.prompt.clone(),
            per_technique,
            baseline_cost,
        });
    }
    Ok(EvalData { entries, repeats })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    /// Shuffles tasks within each category and deals them round-robin, so
    /// every fold's category counts are within one of each other. Repeats
    /// share their task's fold by construction.
    pub fn stratified(tasks: &[(String, Category)], n_folds: usize, seed: u64) -> Result<Self> {
        if n_folds < 2 {
            return Err(Error::validation("need at least 2 folds"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_cat: BTreeMap<Category, Vec<&String>> = BTreeMap::new();
        for (id, c) in tasks {
            by_cat.entry(*c).or_default().push(id);
        }
        let mut assignment = BTreeMap::new();
        let mut next = 0;
        for ids in by_cat.values_mut() {
            ids.sort();
            ids.shuffle(&mut rng);
            for id in ids.iter() {
                assignment.insert((*id).clone(), next % n_folds);
                next += 1;
            }
        }
        Ok(Self {
            n_folds,
            assignment,
        })
    }

    pub fn fold_of(&self, task_id: &str) -> Option<usize> {
        self.assignment.get(task_id).copied()
    }
}
