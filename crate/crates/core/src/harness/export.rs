//! Per-technique summary tables and the evaluate / sweep pipelines used by
//! the command line.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, BASELINE};
use super::evaluate::{evaluate_policies, PolicyTable};
use super::{
    build_router_cache, load_cache_dir, load_pilot, EvalData, FoldPlan, ROUTER_CACHE_FILE,
};
use crate::error::{Error, Result};
use crate::metrics::{
    bootstrap_ci, coding_gain_and_efficiency, paired_effect_size, wilcoxon_signed_rank, win_rate,
    PairedSample,
};
use crate::record::{Flag, RunRecord};
use crate::routing::knn::{lambda_sweep, save_cache, SweepPoint};
use crate::task::load_tasks;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TechniqueSummary {
    pub technique: String,
    pub runs: usize,
    pub failed: usize,
    pub quality: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub cost_per_task: f64,
    pub rho: f64,
    pub gain: f64,
    pub gain_pct: Option<f64>,
    pub efficiency: f64,
    pub p_vs_baseline: f64,
    pub d_z: Option<f64>,
    pub win_rate: Option<f64>,
    pub guard_reverted: usize,
}

/// Pairs each technique record with the baseline record of the same task
/// and repeat and summarizes quality, cost and significance.
pub fn technique_summary(
    records: &BTreeMap<String, Vec<RunRecord>>,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<Vec<TechniqueSummary>> {
    let baseline = records
        .get(BASELINE)
        .ok_or_else(|| Error::validation("cache has no baseline records"))?;
    let base: BTreeMap<(&str, u32), &RunRecord> = baseline
        .iter()
        .map(|r| ((r.task_id.as_str(), r.repeat_index), r))
        .collect();
    let base_mean =
        baseline.iter().map(|r| r.final_quality).sum::<f64>() / baseline.len().max(1) as f64;
    let mut out = Vec::new();
    for (technique, recs) in records {
        let mut quality = Vec::new();
        let mut costs = Vec::new();
        let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in recs {
            let Some(b) = base.get(&(r.task_id.as_str(), r.repeat_index)) else {
                continue;
            };
            if !(b.total_cost > 0.0) {
                continue;
            }
            quality.push(PairedSample::new(
                &r.task_id,
                r.final_quality,
                b.final_quality,
                r.repeat_index,
            ));
            costs.push(PairedSample::new(
                &r.task_id,
                r.total_cost,
                b.total_cost,
                r.repeat_index,
            ));
            groups
                .entry(r.task_id.as_str())
                .or_default()
                .push(r.final_quality);
        }
        if quality.is_empty() {
            log::warn!("technique {technique} has no records paired with the baseline");
            continue;
        }
        let g = coding_gain_and_efficiency(&quality, &costs)?;
        let ci = bootstrap_ci(
            &groups.into_values().collect::<Vec<_>>(),
            n_boot,
            level,
            seed,
        )?;
        let x: Vec<f64> = quality.iter().map(|p| p.technique_value).collect();
        let y: Vec<f64> = quality.iter().map(|p| p.baseline_value).collect();
        let mean_q = x.iter().sum::<f64>() / x.len() as f64;
        out.push(TechniqueSummary {
            technique: technique.clone(),
            runs: recs.len(),
            failed: recs.iter().filter(|r| r.error.is_some()).count(),
            quality: mean_q,
            ci_lo: ci.lo,
            ci_hi: ci.hi,
            cost_per_task: costs.iter().map(|c| c.technique_value).sum::<f64>()
                / costs.len() as f64,
            rho: g.rho,
            gain: g.gain,
            gain_pct: (base_mean > 0.0).then(|| 100.0 * g.gain / base_mean),
            efficiency: g.efficiency,
            p_vs_baseline: wilcoxon_signed_rank(&x, &y)?.p_value,
            d_z: paired_effect_size(&x, &y),
            win_rate: win_rate(&x, &y),
            guard_reverted: recs.iter().filter(|r| r.has(Flag::GuardReverted)).count(),
        });
    }
    Ok(out)
}

pub fn write_technique_summary(rows: &[TechniqueSummary], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("technique_summary.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    std::fs::write(
        dir.join("technique_summary.json"),
        serde_json::to_string_pretty(rows)?,
    )?;
    Ok(())
}

fn technique_names(cfg: &ExperimentConfig) -> Vec<String> {
    cfg.technique_specs()
        .iter()
        .map(|s| s.name().to_string())
        .collect()
}

pub fn load_records_for(cfg: &ExperimentConfig) -> Result<BTreeMap<String, Vec<RunRecord>>> {
    load_cache_dir(&cfg.cache_dir, &technique_names(cfg))
}

/// Builds the router cache from the run records, writes it next to them and
/// returns it with the per-repeat values.
pub fn prepare_eval_data(cfg: &ExperimentConfig) -> Result<EvalData> {
    let records = load_records_for(cfg)?;
    let tasks = load_tasks(&cfg.tasks)?;
    let pilots = load_pilot(&cfg.cache_dir)?;
    let embedder = cfg.embedding.build()?;
    let data = build_router_cache(&records, &tasks, &pilots, embedder.as_ref())?;
    save_cache(&cfg.cache_dir.join(ROUTER_CACHE_FILE), &data.entries)?;
    Ok(data)
}

pub fn evaluate_experiment(cfg: &ExperimentConfig) -> Result<PolicyTable> {
    let data = prepare_eval_data(cfg)?;
    let ids: Vec<_> = data
        .entries
        .iter()
        .map(|e| (e.task_id.clone(), e.category))
        .collect();
    let plan = FoldPlan::stratified(&ids, cfg.evaluation.n_folds, cfg.seed)?;
    evaluate_policies(&data, &plan, &cfg.evaluation, cfg.seed)
}

/// Leave-one-out λ sweep over the full router cache.
pub fn sweep_experiment(cfg: &ExperimentConfig, lambdas: &[f64]) -> Result<Vec<SweepPoint>> {
    let data = prepare_eval_data(cfg)?;
    lambda_sweep(
        &data.entries,
        &data.entries,
        lambdas,
        cfg.evaluation.k,
        true,
    )
}

#[derive(Serialize)]
struct SweepCsvRow {
    lambda: f64,
    mean_quality: f64,
    mean_cost: f64,
    mean_normalized_cost: f64,
    mean_estimated_cost: f64,
}

pub fn write_sweep(rows: &[SweepPoint], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(SweepCsvRow {
            lambda: r.lambda,
            mean_quality: r.mean_quality,
            mean_cost: r.mean_cost,
            mean_normalized_cost: r.mean_normalized_cost,
            mean_estimated_cost: r.mean_estimated_cost,
        })?;
    }
    w.flush()?;
    Ok(())
}
