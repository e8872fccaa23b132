//! Cost overhead, coding gain, effective diversity, Pareto frontiers and the
//! oracle-gap decomposition. Resampling statistics live in [`stats`].

pub mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use stats::{
    bootstrap_ci, branch_correlation, paired_effect_size, wilcoxon_signed_rank, win_rate,
    BootstrapCi, Correlation, Wilcoxon, DEFAULT_BOOTSTRAP_SAMPLES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub task_id: String,
    pub technique_value: f64,
    pub baseline_value: f64,
    pub repeat_index: u32,
}

impl PairedSample {
    pub fn new(
        task_id: impl Into<String>,
        technique_value: f64,
        baseline_value: f64,
        repeat_index: u32,
    ) -> Self {
        Self {
            task_id: task_id.into(),
            technique_value,
            baseline_value,
            repeat_index,
        }
    }

    pub fn difference(&self) -> f64 {
        self.technique_value - self.baseline_value
    }
}

/// `technique_cost / baseline_cost` for one task.
pub fn cost_overhead(technique_cost: f64, baseline_cost: f64) -> Result<f64> {
    if !(baseline_cost > 0.0 && baseline_cost.is_finite()) {
        return Err(Error::validation("baseline cost must be positive"));
    }
    if !(technique_cost >= 0.0 && technique_cost.is_finite()) {
        return Err(Error::validation("technique cost must be non-negative"));
    }
    Ok(technique_cost / baseline_cost)
}

/// Mean of per-task ratios.
pub fn mean_cost_overhead(costs: &[PairedSample]) -> Result<f64> {
    if costs.is_empty() {
        return Err(Error::validation("no cost pairs"));
    }
    let mut sum = 0.0;
    for c in costs {
        sum += cost_overhead(c.technique_value, c.baseline_value)?;
    }
    Ok(sum / costs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodingGain {
    pub gain: f64,
    pub efficiency: f64,
    pub rho: f64,
}

/// Gain from an already-computed mean quality difference and overhead.
pub fn efficiency(gain: f64, rho: f64) -> Result<CodingGain> {
    if !(rho > 0.0) {
        return Err(Error::validation("cost overhead must be positive"));
    }
    Ok(CodingGain {
        gain,
        efficiency: gain / rho,
        rho,
    })
}

/// `G` is the mean paired quality difference, `rho` the mean per-task cost
/// ratio and `eta = G / rho`. Quality and cost pairs are matched on
/// `(task_id, repeat_index)`.
pub fn coding_gain_and_efficiency(
    quality: &[PairedSample],
    costs: &[PairedSample],
) -> Result<CodingGain> {
    if quality.is_empty() {
        return Err(Error::validation("no quality pairs"));
    }
    let index: BTreeMap<(&str, u32), &PairedSample> = costs
        .iter()
        .map(|c| ((c.task_id.as_str(), c.repeat_index), c))
        .collect();
    let mut matched = Vec::with_capacity(quality.len());
    for q in quality {
        let c = index
            .get(&(q.task_id.as_str(), q.repeat_index))
            .ok_or_else(|| {
                Error::validation(format!(
                    "no cost pair for {} repeat {}",
                    q.task_id, q.repeat_index
                ))
            })?;
        matched.push((*c).clone());
    }
    let gain = quality.iter().map(PairedSample::difference).sum::<f64>() / quality.len() as f64;
    efficiency(gain, mean_cost_overhead(&matched)?)
}

/// `d / (1 + (d - 1) max(r, 0))`.
pub fn effective_diversity(d: usize, r: f64) -> Result<f64> {
    if d == 0 {
        return Err(Error::validation("d must be >= 1"));
    }
    let r = if r.is_nan() { 0.0 } else { r.clamp(0.0, 1.0) };
    Ok(d as f64 / (1.0 + (d as f64 - 1.0) * r))
}

/// Indices of non-dominated `(cost, quality)` points, sorted by cost. Of
/// duplicate points only the first is kept.
pub fn pareto_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[b].1.total_cmp(&points[a].1))
            .then(a.cmp(&b))
    });
    let mut out = Vec::new();
    let mut best_q = f64::NEG_INFINITY;
    for i in order {
        if points[i].1 > best_q {
            best_q = points[i].1;
            out.push(i);
        }
    }
    out
}

pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    pareto_indices(points)
        .into_iter()
        .map(|i| points[i])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapDecomposition {
    pub information: f64,
    pub generalization: f64,
    pub policy: f64,
    pub realization: f64,
}

impl GapDecomposition {
    pub fn total(&self) -> f64 {
        self.information + self.generalization + self.policy + self.realization
    }
}

/// Splits `oracle - realized` into four consecutive differences.
pub fn oracle_gap_decomposition(
    oracle: f64,
    feasible: f64,
    learned_cv: f64,
    simulated: f64,
    realized: f64,
) -> GapDecomposition {
    GapDecomposition {
        information: oracle - feasible,
        generalization: feasible - learned_cv,
        policy: learned_cv - simulated,
        realization: simulated - realized,
    }
}
