mod common;

use common::{oracle_means, random_cache};
use proptest::prelude::*;
use reliacode::routing::knn::{
    feasible_quality, lambda_sweep, load_cache, neighbor_estimates, save_cache,
    semknn_dispatch_excluding, COST_EXTREME_LAMBDA,
};
use reliacode::routing::{fit_logit_router, fit_ridge_router, CacheEntry, TechniqueStats};
use reliacode::task::Category;

#[test]
fn quality_only_dispatch_is_neighborhood_argmax() {
    let cache = random_cache(100, 11);
    for (i, e) in cache.iter().enumerate() {
        let pick =
            semknn_dispatch_excluding(&cache, &e.embedding, 0.0, 20, Some(&e.task_id)).unwrap();
        let means = oracle_means(&cache, i, 20);
        let best = means
            .values()
            .map(|v| v.0)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            (means[&pick].0 - best).abs() < 1e-12,
            "task {i}: picked {pick}"
        );
    }
}

#[test]
fn cost_extreme_dispatch_is_cheapest() {
    let cache = random_cache(60, 12);
    for e in &cache {
        let pick = semknn_dispatch_excluding(
            &cache,
            &e.embedding,
            COST_EXTREME_LAMBDA,
            20,
            Some(&e.task_id),
        )
        .unwrap();
        assert_eq!(pick, "baseline");
    }
}

#[test]
fn neighbor_estimates_match_brute_force() {
    let cache = random_cache(40, 13);
    let est = neighbor_estimates(&cache, &cache[5].embedding, 7, Some(&cache[5].task_id)).unwrap();
    let oracle = oracle_means(&cache, 5, 7);
    for c in est {
        let (q, n) = oracle[&c.technique];
        assert!((c.quality - q).abs() < 1e-12);
        assert!((c.normalized_cost - n).abs() < 1e-12);
    }
}

#[test]
fn duplicate_lambdas_give_identical_rows() {
    let cache = random_cache(30, 14);
    let rows = lambda_sweep(&cache, &cache, &[0.5, 0.5], 5, true).unwrap();
    assert_eq!(rows[0], rows[1]);
}

#[test]
fn singleton_cache_cannot_leave_one_out() {
    let cache = random_cache(1, 15);
    assert!(lambda_sweep(&cache, &cache, &[0.0], 5, true).is_err());
    let rows = lambda_sweep(&cache, &cache, &[0.0], 5, false).unwrap();
    assert_eq!(rows[0].picks.len(), 1);
}

#[test]
fn feasible_is_at_least_every_grid_point_and_baseline() {
    let cache = random_cache(60, 16);
    let grid = [0.0, 0.1, 1.0, 10.0];
    let f = feasible_quality(&cache, &grid, 10).unwrap();
    for r in lambda_sweep(&cache, &cache, &grid, 10, true).unwrap() {
        assert!(f.mean_quality >= r.mean_quality);
    }
    let base = cache
        .iter()
        .map(|e| e.per_technique["baseline"].quality)
        .sum::<f64>()
        / cache.len() as f64;
    assert!(f.mean_quality >= base - 1e-12);
}

#[test]
fn cache_round_trips_through_jsonl() {
    let cache = random_cache(12, 17);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("router_cache.jsonl");
    save_cache(&p, &cache).unwrap();
    assert_eq!(load_cache(&p).unwrap(), cache);
}

fn entry(id: usize, category: Category, difficulty: f64, q: &[(&str, f64)]) -> CacheEntry {
    CacheEntry {
        task_id: format!("e{id}"),
        embedding: vec![1.0, id as f64],
        category,
        difficulty,
        prompt: "Same prompt for every entry.".into(),
        per_technique: q
            .iter()
            .map(|(n, v)| {
                (
                    n.to_string(),
                    TechniqueStats {
                        quality: *v,
                        cost: 1.0,
                    },
                )
            })
            .collect(),
        baseline_cost: 1.0,
    }
}

fn separable(n: usize, offset: usize) -> Vec<CacheEntry> {
    (0..n)
        .map(|i| {
            let (cat, best) = if i % 2 == 0 {
                (Category::Qa, "a")
            } else {
                (Category::Code, "b")
            };
            let other = if best == "a" { "b" } else { "a" };
            entry(
                i + offset,
                cat,
                0.1 * (i % 7) as f64,
                &[(best, 0.9), (other, 0.4)],
            )
        })
        .collect()
}

#[test]
fn logit_separates_by_category() {
    let train = separable(40, 0);
    let test = separable(20, 100);
    let r = fit_logit_router(&train, 1e-3).unwrap();
    for e in &test {
        assert_eq!(r.dispatch(e), e.best_technique());
    }
    assert_eq!(r.training_accuracy, Some(1.0));
}

#[test]
fn logit_heavy_penalty_recovers_prior() {
    let mut train = separable(30, 0);
    for e in train.iter_mut().take(10) {
        // make "b" the majority label
        e.per_technique.get_mut("b").unwrap().quality = 0.95;
    }
    let counts = train.iter().filter(|e| e.best_technique() == "b").count();
    assert!(counts > 15);
    let r = fit_logit_router(&train, 1e9).unwrap();
    for e in &train {
        assert_eq!(r.dispatch(e), "b");
    }
}

#[test]
fn logit_single_class_is_degenerate() {
    let train: Vec<_> = (0..5)
        .map(|i| entry(i, Category::Qa, 0.5, &[("a", 0.9), ("b", 0.1)]))
        .collect();
    let r = fit_logit_router(&train, 1.0).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.dispatch(&train[0]), "a");
}

#[test]
fn ridge_recovers_linear_quality() {
    let train: Vec<_> = (0..30)
        .map(|i| {
            let d = i as f64 / 29.0;
            entry(
                i,
                Category::Reasoning,
                d,
                &[("a", 0.2 + 0.5 * d), ("b", 0.7 - 0.3 * d)],
            )
        })
        .collect();
    let r = fit_ridge_router(&train, 1e-9).unwrap();
    for e in &train {
        let s = r.scores(&r.features(e));
        for (name, score) in r.classes.iter().zip(&s) {
            assert!((score - e.per_technique[name].quality).abs() < 1e-6);
        }
        assert_eq!(r.dispatch(e), e.best_technique());
    }
}

#[test]
fn ridge_constant_quality_is_flat() {
    let train: Vec<_> = (0..10)
        .map(|i| entry(i, Category::Qa, i as f64 / 10.0, &[("a", 0.6), ("b", 0.4)]))
        .collect();
    let r = fit_ridge_router(&train, 1.0).unwrap();
    for e in &train {
        let s = r.scores(&r.features(e));
        assert!((s[0] - 0.6).abs() < 1e-9 && (s[1] - 0.4).abs() < 1e-9);
    }
}

#[test]
fn routers_reject_bad_penalties() {
    let train = separable(6, 0);
    assert!(fit_ridge_router(&train, 0.0).is_err());
    assert!(fit_logit_router(&train, -1.0).is_err());
    assert!(fit_logit_router(&[], 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimated_cost_is_non_increasing_in_lambda(seed in 0u64..10_000) {
        let cache = random_cache(40, seed);
        let grid = [0.0, 0.001, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 100.0];
        let rows = lambda_sweep(&cache, &cache, &grid, 10, true).unwrap();
        for w in rows.windows(2) {
            prop_assert!(w[1].mean_estimated_cost <= w[0].mean_estimated_cost + 1e-12);
        }
    }

    #[test]
    fn dispatch_ignores_per_task_cost_scale(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let cache = random_cache(25, seed);
        let scaled: Vec<CacheEntry> = cache
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.baseline_cost *= scale;
                for s in e.per_technique.values_mut() {
                    s.cost *= scale;
                }
                e
            })
            .collect();
        for e in &cache {
            for lambda in [0.0, 0.05, 1.0] {
                let a = semknn_dispatch_excluding(&cache, &e.embedding, lambda, 7, Some(&e.task_id)).unwrap();
                let b = semknn_dispatch_excluding(&scaled, &e.embedding, lambda, 7, Some(&e.task_id)).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
