mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::{random_cache, scorer, synthetic, task, Counting};
use reliacode::channel::ChannelRef;
use reliacode::harness::evaluate::expected_policy_names;
use reliacode::harness::{
    evaluate_policies, load_records, run_experiment, save_records, technique_cache_path, EvalData,
    EvaluationConfig, Experiment, ExperimentConfig, FoldPlan, BASELINE,
};
use reliacode::routing::CacheEntry;
use reliacode::task::{Category, Task};
use reliacode::technique::ChannelPool;

fn config(cache_dir: &Path) -> ExperimentConfig {
    let synth = |name: &str, base: f64, seed: u64| {
        serde_json::json!({
            "name": name, "backend": "synthetic", "model_id": name,
            "synthetic": {"base_quality": base, "quality_noise_sd": 0.1, "cost_per_call": 0.001, "seed": seed}
        })
    };
    serde_json::from_value(serde_json::json!({
        "channels": [synth("a", 0.6, 1), synth("b", 0.7, 2)],
        "judge": synth("judge", 0.8, 3),
        "tasks": "unused.jsonl",
        "repeats": 2,
        "seed": 5,
        "concurrency": 2,
        "cache_dir": cache_dir,
        "techniques": [{"technique": "diversity_sc"}]
    }))
    .unwrap()
}

struct Fixture {
    exp: Experiment,
    counters: Vec<std::sync::Arc<Counting>>,
}

fn fixture(cache_dir: &Path) -> Fixture {
    let counters: Vec<_> = [
        synthetic("a", 0.6, 0.1, 0.001, 1),
        synthetic("b", 0.7, 0.1, 0.001, 2),
        synthetic("judge", 0.8, 0.05, 0.0005, 3),
    ]
    .into_iter()
    .map(Counting::wrap)
    .collect();
    let refs: Vec<ChannelRef> = counters.iter().map(|c| c.clone() as ChannelRef).collect();
    let pool = ChannelPool::new(refs[..2].to_vec(), refs[2].clone()).unwrap();
    let tasks: Vec<Task> = ["x", "y", "z"].iter().map(|id| task(id)).collect();
    Fixture {
        exp: Experiment {
            config: config(cache_dir),
            scorer: scorer(&refs[2]),
            pool,
            tasks,
        },
        counters,
    }
}

fn total_calls(f: &Fixture) -> usize {
    f.counters.iter().map(|c| c.count()).sum()
}

#[test]
fn run_fills_every_cell_once_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture(dir.path());
    let s = run_experiment(&f.exp).unwrap();
    // 2 techniques (baseline added) x 3 tasks x 2 repeats
    assert_eq!(s.new_records, 12);
    assert_eq!(s.failed, 0);
    assert_eq!(s.new_pilots, 3);
    for t in [BASELINE, "diversity_sc"] {
        assert_eq!(
            load_records(&technique_cache_path(dir.path(), t))
                .unwrap()
                .len(),
            6
        );
    }
    let before = total_calls(&f);
    let again = run_experiment(&f.exp).unwrap();
    assert_eq!(again.new_records, 0);
    assert_eq!(again.new_pilots, 0);
    assert_eq!(again.skipped, 12);
    assert_eq!(total_calls(&f), before);
}

#[test]
fn records_round_trip_and_resume_after_partial_cache() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture(dir.path());
    run_experiment(&f.exp).unwrap();
    let path = technique_cache_path(dir.path(), "diversity_sc");
    let recs = load_records(&path).unwrap();
    save_records(&path, &recs).unwrap();
    assert_eq!(load_records(&path).unwrap(), recs);

    save_records(&path, &recs[..4]).unwrap();
    let s = run_experiment(&f.exp).unwrap();
    assert_eq!(s.new_records, 2);
    let resumed = load_records(&path).unwrap();
    assert_eq!(resumed.len(), 6);
    assert_eq!(&resumed[..4], &recs[..4]);
}

#[test]
fn folds_cover_every_task_once_and_balance_categories() {
    let ids: Vec<(String, Category)> = (0..53)
        .map(|i| {
            (
                format!("t{i}"),
                [Category::Qa, Category::Code, Category::Reasoning][i % 3],
            )
        })
        .collect();
    let plan = FoldPlan::stratified(&ids, 5, 3).unwrap();
    assert_eq!(plan.assignment.len(), ids.len());
    for cat in [Category::Qa, Category::Code, Category::Reasoning] {
        let mut counts = [0usize; 5];
        for (id, c) in &ids {
            if *c == cat {
                counts[plan.fold_of(id).unwrap()] += 1;
            }
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }
    assert_eq!(plan, FoldPlan::stratified(&ids, 5, 3).unwrap());
}

fn plan_for(entries: &[CacheEntry], seed: u64) -> FoldPlan {
    let ids: Vec<_> = entries
        .iter()
        .map(|e| (e.task_id.clone(), e.category))
        .collect();
    FoldPlan::stratified(&ids, 5, seed).unwrap()
}

fn quick_cfg() -> EvaluationConfig {
    EvaluationConfig {
        n_boot: 200,
        lambdas: vec![0.0, 0.1, 1.0, 10.0],
        k: 10,
        ..EvaluationConfig::default()
    }
}

#[test]
fn oracle_bounds_every_policy_and_rows_match_config() {
    let cfg = quick_cfg();
    for seed in 0..5 {
        let entries = random_cache(60, seed);
        let plan = plan_for(&entries, seed);
        let data = EvalData {
            entries,
            repeats: BTreeMap::new(),
        };
        let table = evaluate_policies(&data, &plan, &cfg, seed).unwrap();
        let names: Vec<_> = table.rows.iter().map(|r| r.policy.clone()).collect();
        assert_eq!(names, expected_policy_names(&cfg));
        let oracle = table.row("oracle").unwrap().quality;
        for r in &table.rows {
            assert!(r.quality <= oracle + 1e-12, "{} beats oracle", r.policy);
        }
        let feasible = table.row("feasible").unwrap().quality;
        assert!(feasible >= table.row("baseline").unwrap().quality - 1e-12);
    }
}

#[test]
fn dominating_technique_collapses_every_policy() {
    let mut entries = random_cache(45, 8);
    for e in &mut entries {
        for s in e.per_technique.values_mut() {
            s.quality = s.quality.min(0.9);
        }
        e.per_technique.get_mut("turbo").unwrap().quality = 0.99;
    }
    let data = EvalData {
        entries: entries.clone(),
        repeats: BTreeMap::new(),
    };
    let cfg = EvaluationConfig {
        lambdas: vec![0.0],
        ..quick_cfg()
    };
    let table = evaluate_policies(&data, &plan_for(&entries, 1), &cfg, 1).unwrap();
    for r in &table.rows {
        if r.policy == BASELINE {
            continue;
        }
        assert!((r.quality - 0.99).abs() < 1e-12, "{}", r.policy);
        if let Some(d) = r.delta_vs_fb_cv {
            assert!(d.abs() < 1e-12);
        }
    }
}

#[test]
fn in_sample_fixed_best_is_optimistic_on_average() {
    let cfg = quick_cfg();
    let mut gap = 0.0;
    for seed in 0..8 {
        let entries = random_cache(45, 100 + seed);
        let data = EvalData {
            entries: entries.clone(),
            repeats: BTreeMap::new(),
        };
        let t = evaluate_policies(&data, &plan_for(&entries, seed), &cfg, seed).unwrap();
        let is = t.row("fixed_best_is").unwrap().quality;
        assert!(is >= t.row("baseline").unwrap().quality);
        gap += is - t.row("fixed_best_cv").unwrap().quality;
    }
    assert!(gap >= 0.0);
}
