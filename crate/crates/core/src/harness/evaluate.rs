//! Routing-policy comparison over a completed cache: in-sample ceilings,
//! out-of-fold routers and fixed-technique references.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{EvaluationConfig, PolicyKind, BASELINE};
use super::{EvalData, FoldPlan};
use crate::error::{Error, Result};
use crate::metrics::{bootstrap_ci, paired_effect_size, wilcoxon_signed_rank, win_rate};
use crate::routing::knn::{choose, feasible_quality, neighbor_estimates, CacheEntry};
use crate::routing::learned::{fit_logit_router, fit_ridge_router, RouterWeights};
use crate::task::Category;

const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub policy: String,
    /// Scored on the tasks it was fitted on.
    pub in_sample: bool,
    /// Fixed technique name where the policy reduces to one.
    pub detail: String,
    pub quality: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub cost_per_task: f64,
    pub quality_per_dollar: Option<f64>,
    pub rho: f64,
    /// Relative quality gain over the baseline, in percent.
    pub gain_pct: Option<f64>,
    pub delta_vs_fb_cv: Option<f64>,
    pub p_vs_fb_cv: Option<f64>,
    pub d_z_vs_fb_cv: Option<f64>,
    pub win_rate_vs_fb_cv: Option<f64>,
    pub delta_vs_fb_is: Option<f64>,
    pub picks: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub rows: Vec<PolicyRow>,
    pub candidates: Vec<String>,
    pub excluded_techniques: Vec<String>,
    pub n_tasks: usize,
}

impl PolicyTable {
    pub fn row(&self, policy: &str) -> Option<&PolicyRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }
}

pub fn semknn_policy_name(lambda: f64) -> String {
    format!("semknn_lambda_{lambda}")
}

/// Row names `evaluate_policies` produces for a configuration, in order.
pub fn expected_policy_names(cfg: &EvaluationConfig) -> Vec<String> {
    let mut out = Vec::new();
    for kind in PolicyKind::ALL {
        if !cfg.policies.contains(&kind) {
            continue;
        }
        match kind {
            PolicyKind::Semknn => out.extend(cfg.lambdas.iter().map(|l| semknn_policy_name(*l))),
            other => out.push(policy_name(other).to_string()),
        }
    }
    out
}

fn policy_name(kind: PolicyKind) -> &'static str {
    match kind {
        PolicyKind::Oracle => "oracle",
        PolicyKind::Feasible => "feasible",
        PolicyKind::Semknn => "semknn",
        PolicyKind::Ridge => "ridge",
        PolicyKind::Logit => "logit",
        PolicyKind::CategoryBest => "category_best",
        PolicyKind::DifficultyBins => "difficulty_bins",
        PolicyKind::FixedBestIs => "fixed_best_is",
        PolicyKind::FixedBestCv => "fixed_best_cv",
        PolicyKind::Baseline => "baseline",
    }
}

/// Highest mean quality over `entries`; ties go to the lower mean
/// normalized cost, then the first name.
pub fn fixed_best<'a>(
    entries: impl IntoIterator<Item = &'a CacheEntry>,
    candidates: &[String],
) -> Option<String> {
    let mut sums: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for e in entries {
        for c in candidates {
            if let Some(s) = e.per_technique.get(c) {
                let slot = sums.entry(c.as_str()).or_insert((0.0, 0.0, 0));
                slot.0 += s.quality;
                slot.1 += s.cost / e.baseline_cost;
                slot.2 += 1;
            }
        }
    }
    let mut best: Option<(&str, f64, f64)> = None;
    for (name, (q, c, n)) in sums {
        let (q, c) = (q / n as f64, c / n as f64);
        best = match best {
            Some((bn, bq, bc)) if !(q > bq + TIE_EPS || ((q - bq).abs() <= TIE_EPS && c < bc)) => {
                Some((bn, bq, bc))
            }
            _ => Some((name, q, c)),
        };
    }
    best.map(|b| b.0.to_string())
}

fn quartile_edges(mut values: Vec<f64>) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (values.len() - 1) as f64 * p;
        let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
        values[lo] + (h - lo as f64) * (values[hi] - values[lo])
    };
    vec![q(0.25), q(0.5), q(0.75)]
}

fn bin_of(edges: &[f64], d: f64) -> usize {
    edges.iter().filter(|e| d >= **e).count()
}

/// Per-task technique picks of one policy, indexed like the entries.
type Picks = Vec<String>;

struct Folds<'a> {
    train: Vec<Vec<&'a CacheEntry>>,
    test: Vec<Vec<usize>>,
}

fn split<'a>(entries: &'a [CacheEntry], plan: &FoldPlan) -> Result<Folds<'a>> {
    let mut train = vec![Vec::new(); plan.n_folds];
    let mut test = vec![Vec::new(); plan.n_folds];
    for (i, e) in entries.iter().enumerate() {
        let f = plan
            .fold_of(&e.task_id)
            .ok_or_else(|| Error::validation(format!("task {} has no fold", e.task_id)))?;
        test[f].push(i);
        for (g, t) in train.iter_mut().enumerate() {
            if g != f {
                t.push(e);
            }
        }
    }
    Ok(Folds { train, test })
}

fn cross_validate<F>(entries: &[CacheEntry], folds: &Folds<'_>, mut fit: F) -> Result<Picks>
where
    F: FnMut(&[&CacheEntry]) -> Result<Box<dyn Fn(&CacheEntry) -> Result<String>>>,
{
    let mut picks = vec![String::new(); entries.len()];
    for (train, test) in folds.train.iter().zip(&folds.test) {
        if test.is_empty() {
            continue;
        }
        if train.is_empty() {
            return Err(Error::validation("a fold has no training tasks"));
        }
        let policy = fit(train)?;
        for &i in test {
            picks[i] = policy(&entries[i])?;
        }
    }
    Ok(picks)
}

fn router_policy(weights: RouterWeights) -> Box<dyn Fn(&CacheEntry) -> Result<String>> {
    Box::new(move |e| Ok(weights.dispatch(e).to_string()))
}

/// Computes every configured policy on `data` and summarizes each against
/// the baseline and the fixed-best references.
pub fn evaluate_policies(
    data: &EvalData,
    plan: &FoldPlan,
    cfg: &EvaluationConfig,
    seed: u64,
) -> Result<PolicyTable> {
    cfg.validate()?;
    if data.entries.len() < 2 {
        return Err(Error::validation(
            "policy evaluation needs at least 2 tasks",
        ));
    }
    let all: BTreeSet<&String> = data
        .entries
        .iter()
        .flat_map(|e| e.per_technique.keys())
        .collect();
    let candidates: Vec<String> = all
        .iter()
        .filter(|t| {
            data.entries
                .iter()
                .all(|e| e.per_technique.contains_key(**t))
        })
        .map(|t| (*t).clone())
        .collect();
    let excluded: Vec<String> = all
        .iter()
        .filter(|t| !candidates.contains(t))
        .map(|t| (*t).clone())
        .collect();
    for t in &excluded {
        log::warn!("technique {t} does not cover every task; left out of routing");
    }
    if !candidates.iter().any(|c| c == BASELINE) {
        return Err(Error::validation("baseline must cover every task"));
    }
    let entries: Vec<CacheEntry> = data
        .entries
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.per_technique.retain(|k, _| candidates.contains(k));
            e
        })
        .collect();
    let folds = split(&entries, plan)?;
    let mut named: Vec<(String, bool, String, Picks)> = Vec::new();
    let best_is = fixed_best(&entries, &candidates).expect("non-empty candidates");
    let fb_cv = cross_validate(&entries, &folds, |train| {
        let t = fixed_best(train.iter().copied(), &candidates).expect("non-empty candidates");
        Ok(Box::new(move |_: &CacheEntry| Ok(t.clone())))
    })?;

    for kind in PolicyKind::ALL {
        if !cfg.policies.contains(&kind) {
            continue;
        }
        let name = policy_name(kind).to_string();
        match kind {
            PolicyKind::Oracle => {
                let picks = entries
                    .iter()
                    .map(|e| e.best_technique().to_string())
                    .collect();
                named.push((name, true, String::new(), picks));
            }
            PolicyKind::Feasible => {
                let best = feasible_quality(&entries, &cfg.lambdas, cfg.k)?;
                named.push((name, true, format!("lambda={}", best.lambda), best.picks));
            }
            PolicyKind::Semknn => {
                for &lambda in &cfg.lambdas {
                    let picks = cross_validate(&entries, &folds, |train| {
                        let owned: Vec<CacheEntry> = train.iter().map(|e| (*e).clone()).collect();
                        let k = cfg.k;
                        Ok(Box::new(move |e: &CacheEntry| {
                            let cands = neighbor_estimates(&owned, &e.embedding, k, None)?;
                            Ok(choose(&cands, lambda).expect("non-empty").technique.clone())
                        }))
                    })?;
                    named.push((semknn_policy_name(lambda), false, String::new(), picks));
                }
            }
            PolicyKind::Ridge | PolicyKind::Logit => {
                let l2 = if kind == PolicyKind::Ridge {
                    cfg.ridge_l2
                } else {
                    cfg.logit_l2
                };
                let picks = cross_validate(&entries, &folds, |train| {
                    let owned: Vec<CacheEntry> = train.iter().map(|e| (*e).clone()).collect();
                    let w = if kind == PolicyKind::Ridge {
                        fit_ridge_router(&owned, l2)?
                    } else {
                        fit_logit_router(&owned, l2)?
                    };
                    Ok(router_policy(w))
                });
                match picks {
                    Ok(p) => named.push((name, false, String::new(), p)),
                    Err(e) => log::warn!("{name} policy excluded: {e}"),
                }
            }
            PolicyKind::CategoryBest => {
                let picks = cross_validate(&entries, &folds, |train| {
                    let global = fixed_best(train.iter().copied(), &candidates).expect("non-empty");
                    let mut per_cat: BTreeMap<Category, String> = BTreeMap::new();
                    for cat in Category::ALL {
                        if let Some(t) = fixed_best(
                            train.iter().copied().filter(|e| e.category == cat),
                            &candidates,
                        ) {
                            per_cat.insert(cat, t);
                        }
                    }
                    Ok(Box::new(move |e: &CacheEntry| {
                        Ok(per_cat
                            .get(&e.category)
                            .cloned()
                            .unwrap_or_else(|| global.clone()))
                    }))
                })?;
                named.push((name, false, String::new(), picks));
            }
            PolicyKind::DifficultyBins => {
                let picks = cross_validate(&entries, &folds, |train| {
                    let edges = quartile_edges(train.iter().map(|e| e.difficulty).collect());
                    let global = fixed_best(train.iter().copied(), &candidates).expect("non-empty");
                    let per_bin: Vec<String> = (0..=edges.len())
                        .map(|b| {
                            fixed_best(
                                train
                                    .iter()
                                    .copied()
                                    .filter(|e| bin_of(&edges, e.difficulty) == b),
                                &candidates,
                            )
                            .unwrap_or_else(|| global.clone())
                        })
                        .collect();
                    Ok(Box::new(move |e: &CacheEntry| {
                        Ok(per_bin[bin_of(&edges, e.difficulty)].clone())
                    }))
                })?;
                named.push((name, false, String::new(), picks));
            }
            PolicyKind::FixedBestIs => {
                named.push((
                    name,
                    true,
                    best_is.clone(),
                    vec![best_is.clone(); entries.len()],
                ));
            }
            PolicyKind::FixedBestCv => {
                named.push((name, false, String::new(), fb_cv.clone()));
            }
            PolicyKind::Baseline => {
                named.push((
                    name,
                    false,
                    BASELINE.to_string(),
                    vec![BASELINE.to_string(); entries.len()],
                ));
            }
        }
    }

    let quality_of = |picks: &Picks| -> Vec<f64> {
        entries
            .iter()
            .zip(picks)
            .map(|(e, t)| e.per_technique[t].quality)
            .collect()
    };
    let baseline_q = quality_of(&vec![BASELINE.to_string(); entries.len()]);
    let baseline_mean = baseline_q.iter().sum::<f64>() / baseline_q.len() as f64;
    let fb_cv_q = quality_of(&fb_cv);
    let fb_is_q = quality_of(&vec![best_is.clone(); entries.len()]);
    let n = entries.len() as f64;

    let mut rows = Vec::with_capacity(named.len());
    for (policy, in_sample, detail, picks) in named {
        let q = quality_of(&picks);
        let groups: Vec<Vec<f64>> = entries
            .iter()
            .zip(&picks)
            .zip(&q)
            .map(|((e, t), mean)| {
                let r = data.repeat_quality(&e.task_id, t);
                if r.is_empty() {
                    vec![*mean]
                } else {
                    r
                }
            })
            .collect();
        let ci = bootstrap_ci(&groups, cfg.n_boot, cfg.level, seed)?;
        let cost: f64 = entries
            .iter()
            .zip(&picks)
            .map(|(e, t)| e.per_technique[t].cost)
            .sum::<f64>()
            / n;
        let rho: f64 = entries
            .iter()
            .zip(&picks)
            .map(|(e, t)| e.per_technique[t].cost / e.baseline_cost)
            .sum::<f64>()
            / n;
        let quality = q.iter().sum::<f64>() / n;
        let mut counts = BTreeMap::new();
        for t in &picks {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
        let vs_cv = policy != "fixed_best_cv";
        let vs_is = policy != "fixed_best_is";
        let mean_diff = |other: &[f64]| q.iter().zip(other).map(|(a, b)| a - b).sum::<f64>() / n;
        rows.push(PolicyRow {
            in_sample,
            detail,
            quality,
            ci_lo: ci.lo,
            ci_hi: ci.hi,
            cost_per_task: cost,
            quality_per_dollar: (cost > 0.0).then(|| quality / cost),
            rho,
            gain_pct: (baseline_mean > 0.0)
                .then(|| 100.0 * (quality - baseline_mean) / baseline_mean),
            delta_vs_fb_cv: vs_cv.then(|| mean_diff(&fb_cv_q)),
            p_vs_fb_cv: if vs_cv {
                Some(wilcoxon_signed_rank(&q, &fb_cv_q)?.p_value)
            } else {
                None
            },
            d_z_vs_fb_cv: if vs_cv {
                paired_effect_size(&q, &fb_cv_q)
            } else {
                None
            },
            win_rate_vs_fb_cv: if vs_cv { win_rate(&q, &fb_cv_q) } else { None },
            delta_vs_fb_is: vs_is.then(|| mean_diff(&fb_is_q)),
            picks: counts,
            policy,
        });
    }
    Ok(PolicyTable {
        rows,
        candidates,
        excluded_techniques: excluded,
        n_tasks: entries.len(),
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    policy: &'a str,
    in_sample: bool,
    detail: &'a str,
    quality: f64,
    ci_lo: f64,
    ci_hi: f64,
    cost_per_task: f64,
    quality_per_dollar: Option<f64>,
    rho: f64,
    gain_pct: Option<f64>,
    delta_vs_fb_cv: Option<f64>,
    p_vs_fb_cv: Option<f64>,
    d_z_vs_fb_cv: Option<f64>,
    win_rate_vs_fb_cv: Option<f64>,
    delta_vs_fb_is: Option<f64>,
}

/// Writes `policy_table.csv` and `policy_table.json` into `dir`.
pub fn write_policy_table(table: &PolicyTable, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("policy_table.csv"))?;
    for r in &table.rows {
        w.serialize(CsvRow {
            policy: &r.policy,
            in_sample: r.in_sample,
            detail: &r.detail,
            quality: r.quality,
            ci_lo: r.ci_lo,
            ci_hi: r.ci_hi,
            cost_per_task: r.cost_per_task,
            quality_per_dollar: r.quality_per_dollar,
            rho: r.rho,
            gain_pct: r.gain_pct,
            delta_vs_fb_cv: r.delta_vs_fb_cv,
            p_vs_fb_cv: r.p_vs_fb_cv,
            d_z_vs_fb_cv: r.d_z_vs_fb_cv,
            win_rate_vs_fb_cv: r.win_rate_vs_fb_cv,
            delta_vs_fb_is: r.delta_vs_fb_is,
        })?;
    }
    w.flush()?;
    std::fs::write(
        dir.join("policy_table.json"),
        serde_json::to_string_pretty(table)?,
    )?;
    Ok(())
}
