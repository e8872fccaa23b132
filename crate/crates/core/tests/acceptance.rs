//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::{
    brute_force_p, judge, oracle_means, random_cache, scorer, synthetic, synthetic_with, task,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reliacode::channel::{build_channel, ChannelConfig, ChannelRef};
use reliacode::harness::evaluate::expected_policy_names;
use reliacode::harness::{evaluate_policies, EvalData, EvaluationConfig, FoldPlan};
use reliacode::metrics::{
    bootstrap_ci, coding_gain_and_efficiency, effective_diversity, oracle_gap_decomposition,
    wilcoxon_signed_rank, PairedSample,
};
use reliacode::rateless::FountainParams;
use reliacode::record::{Flag, RunContext};
use reliacode::retransmit::{HarqCcParams, HarqIrParams, TurboParams};
use reliacode::routing::knn::{lambda_sweep, semknn_dispatch_excluding, COST_EXTREME_LAMBDA};
use reliacode::scoring::blended_score;
use reliacode::technique::{ChannelPool, TechniqueConfig, TechniqueSpec};
use reliacode::theory::{
    critical_csi_variance, iterate_quality_map, monte_carlo_crossover, snr_egc, snr_mrc_noisy_csi,
    AmplitudeProfile, QualityMap,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn random_profile(rng: &mut ChaCha8Rng, d: usize) -> AmplitudeProfile {
    let amps = (0..d).map(|_| rng.random_range(0.3..3.0)).collect();
    AmplitudeProfile::new(amps, rng.random_range(0.5..2.0), 0.0).unwrap()
}

fn crossover_closed_form() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let p = random_profile(&mut rng, 2 + i % 5);
        let crit = critical_csi_variance(&p);
        let at = p.with_sigma_w(crit.value.sqrt());
        worst = worst.max((snr_mrc_noisy_csi(&at) - snr_egc(&p)).abs());
    }
    let worked =
        critical_csi_variance(&AmplitudeProfile::new(vec![1.0, 2.0], 1.0, 0.0).unwrap()).value;
    let elapsed = start.elapsed();
    check(
        worst < 1e-9 && worked == 0.625 && within(elapsed, 1.0),
        format!("max |Δ| = {worst:.2e}, σ_w*²(1,2) = {worked}, {elapsed:.2?}"),
    )
}

fn crossover_monte_carlo() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut matched = 0;
    for i in 0..10 {
        let p = loop {
            let p = random_profile(&mut rng, 2 + i % 4);
            if !critical_csi_variance(&p).degenerate {
                break p;
            }
        };
        let crit = critical_csi_variance(&p).value;
        let mut ok = true;
        for factor in [0.5, 2.0] {
            let at = p.with_sigma_w((factor * crit).sqrt());
            let analytic = (snr_mrc_noisy_csi(&at) - snr_egc(&p)).signum();
            let est =
                monte_carlo_crossover(&at, 100_000, 100 + i as u64).map_err(|e| e.to_string())?;
            ok &= (est.mrc_noisy - est.egc).signum() == analytic;
        }
        matched += ok as usize;
    }
    let elapsed = start.elapsed();
    check(
        matched >= 9 && within(elapsed, 30.0),
        format!("{matched}/10 profiles match, {elapsed:.2?}"),
    )
}

fn threshold_dynamics() -> Outcome {
    let start = Instant::now();
    let sqrt = QualityMap::Power { exponent: 0.5 };
    let t = iterate_quality_map(&sqrt, 0.5, 11, 0.0, false, 0).map_err(|e| e.to_string())?;
    let reached = t.iterates.iter().position(|q| (q - 1.0).abs() < 1e-3);
    let slope = sqrt.derivative(1.0);
    let n = t.iterates.len();
    let ratio = (t.iterates[n - 1] - 1.0) / (t.iterates[n - 2] - 1.0);
    let square = QualityMap::Power { exponent: 2.0 };
    let u = iterate_quality_map(&square, 0.9, 12, 0.0, false, 0).map_err(|e| e.to_string())?;
    let collapsed = u.iterates.iter().any(|q| *q < 0.1);
    let held = u.running_max.iter().all(|m| *m == 0.9);
    let elapsed = start.elapsed();
    check(
        reached.is_some_and(|k| k <= 11) && (slope - 0.5).abs() < 1e-5 && (ratio - 0.5).abs() < 1e-3 && collapsed && held && within(elapsed, 1.0),
        format!(
            "√q hits 1±1e-3 at k={reached:?} (f'(1) ≈ {slope:.6}, error ratio {ratio:.4}), q² final {:.2e} with running max {}, {elapsed:.2?}",
            u.iterates.last().unwrap(),
            u.running_max.last().unwrap()
        ),
    )
}

fn guarded_configs() -> Vec<TechniqueConfig> {
    vec![
        TechniqueConfig::DiversitySc,
        TechniqueConfig::DiversityMrc { synthesizer: None },
        TechniqueConfig::DiversityEgc { synthesizer: None },
        TechniqueConfig::DiversityScN { n: 4 },
        TechniqueConfig::SoftMrc { synthesizer: None },
        TechniqueConfig::HarqCc {
            params: HarqCcParams::default(),
            synthesizer: None,
        },
        TechniqueConfig::HarqIr {
            params: HarqIrParams::default(),
            critic: None,
        },
        TechniqueConfig::Turbo {
            params: TurboParams::default(),
            critic: None,
        },
        TechniqueConfig::Fountain {
            params: FountainParams::default(),
            synthesizer: None,
        },
        TechniqueConfig::SoftFountain {
            params: FountainParams::default(),
            synthesizer: None,
        },
        TechniqueConfig::Fec {
            rate: 0.5,
            decoder: None,
        },
    ]
}

fn guard_universality() -> Outcome {
    let start = Instant::now();
    let configs = guarded_configs();
    let maps = [
        QualityMap::Identity,
        QualityMap::Power { exponent: 2.0 },
        QualityMap::Power { exponent: 0.5 },
        QualityMap::Affine {
            intercept: -0.2,
            slope: 1.0,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let runs = 10_000;
    let mut violations = 0;
    for i in 0..runs {
        let seed: u64 = rng.random();
        let sd = rng.random_range(0.0..0.3);
        let a = synthetic_with(
            "a",
            rng.random_range(0.05..0.95),
            sd,
            rng.random_range(-0.2..0.8),
            maps[rng.random_range(0..maps.len())].clone(),
            0.002,
            seed,
        );
        let b = synthetic_with(
            "b",
            rng.random_range(0.05..0.95),
            sd,
            rng.random_range(-0.2..0.8),
            maps[rng.random_range(0..maps.len())].clone(),
            0.001,
            seed ^ 1,
        );
        let pool =
            ChannelPool::new(vec![a, b], judge(rng.random_range(0.0..0.1), seed ^ 2)).unwrap();
        let t = task(&format!("g{i}"));
        let s = scorer(&pool.judge);
        let ctx = RunContext::new(&t, &s, seed, 0);
        let config = configs[i % configs.len()].clone();
        let r = TechniqueSpec::new(config)
            .run(&pool, &ctx)
            .map_err(|e| e.to_string())?;
        if r.best_individual_score()
            .is_none_or(|b| r.final_quality < b)
        {
            violations += 1;
        }
    }
    let elapsed = start.elapsed();
    check(
        violations == 0 && within(elapsed, 120.0),
        format!(
            "{violations} violations in {runs} runs over {} techniques, {elapsed:.2?}",
            configs.len()
        ),
    )
}

fn fountain_run(quality: f64) -> Result<(usize, bool), String> {
    let pool =
        ChannelPool::new(vec![synthetic("a", quality, 0.0, 0.001, 1)], judge(0.0, 2)).unwrap();
    let t = task("fountain");
    let s = scorer(&pool.judge);
    let ctx = RunContext::new(&t, &s, 0, 0);
    let cfg = TechniqueConfig::Fountain {
        params: FountainParams::default(),
        synthesizer: None,
    };
    let r = TechniqueSpec::new(cfg)
        .run(&pool, &ctx)
        .map_err(|e| e.to_string())?;
    Ok((r.individual_outputs.len(), r.has(Flag::EarlyStop)))
}

fn fountain_stopping() -> Outcome {
    let p = FountainParams::default();
    let (high, early) = fountain_run(0.9)?;
    let (low, _) = fountain_run(0.3)?;
    let (high2, _) = fountain_run(0.9)?;
    check(
        high == p.n_min && early && low == p.n_max && high == high2,
        format!(
            "q=0.9 stops at {high} (n_min {}), q=0.3 runs {low} (n_max {})",
            p.n_min, p.n_max
        ),
    )
}

fn router_limits() -> Outcome {
    let start = Instant::now();
    let cache = random_cache(100, 6);
    let k = 20;
    let mut argmax_ok = 0;
    let mut cheapest_ok = 0;
    for (i, e) in cache.iter().enumerate() {
        let ex = Some(e.task_id.as_str());
        let pick = semknn_dispatch_excluding(&cache, &e.embedding, 0.0, k, ex)
            .map_err(|e| e.to_string())?;
        let means = oracle_means(&cache, i, k);
        let best = means
            .values()
            .map(|v| v.0)
            .fold(f64::NEG_INFINITY, f64::max);
        argmax_ok += ((means[&pick].0 - best).abs() < 1e-12) as usize;
        let pick = semknn_dispatch_excluding(&cache, &e.embedding, COST_EXTREME_LAMBDA, k, ex)
            .map_err(|e| e.to_string())?;
        let cheapest = means.values().map(|v| v.1).fold(f64::INFINITY, f64::min);
        cheapest_ok += ((means[&pick].1 - cheapest).abs() < 1e-12) as usize;
    }
    let grid = [0.0, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 38.0];
    let rows = lambda_sweep(&cache, &cache, &grid, k, true).map_err(|e| e.to_string())?;
    let monotone = rows.windows(2).all(|w| {
        w[1].mean_normalized_cost <= w[0].mean_normalized_cost + 1e-12
            && w[1].mean_estimated_cost <= w[0].mean_estimated_cost + 1e-12
    });
    let costs: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2}", r.mean_normalized_cost))
        .collect();
    let elapsed = start.elapsed();
    check(
        argmax_ok == 100 && cheapest_ok == 100 && monotone && within(elapsed, 10.0),
        format!(
            "λ=0 argmax {argmax_ok}/100, λ=1e9 cheapest {cheapest_ok}/100, normalized cost [{}], {elapsed:.2?}",
            costs.join(", ")
        ),
    )
}

fn policy_ordering() -> Outcome {
    let cfg = EvaluationConfig {
        n_boot: 500,
        ..EvaluationConfig::default()
    };
    let mut worst_telescope: f64 = 0.0;
    let mut ordered = 0;
    let caches = 6;
    for seed in 0..caches {
        let entries = random_cache(60 + 10 * seed as usize, 70 + seed);
        let ids: Vec<_> = entries
            .iter()
            .map(|e| (e.task_id.clone(), e.category))
            .collect();
        let plan = FoldPlan::stratified(&ids, 5, seed).map_err(|e| e.to_string())?;
        let data = EvalData {
            entries,
            repeats: BTreeMap::new(),
        };
        let t = evaluate_policies(&data, &plan, &cfg, seed).map_err(|e| e.to_string())?;
        let q = |name: &str| {
            t.row(name)
                .map(|r| r.quality)
                .ok_or(format!("missing row {name}"))
        };
        let (oracle, feasible, baseline) = (q("oracle")?, q("feasible")?, q("baseline")?);
        ordered += (oracle >= feasible && feasible >= baseline) as usize;
        let g = oracle_gap_decomposition(
            oracle,
            feasible,
            q("semknn_lambda_3")?,
            q("difficulty_bins")?,
            baseline,
        );
        worst_telescope = worst_telescope.max((g.total() - (oracle - baseline)).abs());
    }
    let g = oracle_gap_decomposition(0.912, 0.877, 0.874, 0.694, 0.753);
    let published = [0.034, 0.003, 0.181, -0.060];
    let terms = [g.information, g.generalization, g.policy, g.realization];
    let paper_ok = terms
        .iter()
        .zip(published)
        .all(|(a, b)| (a - b).abs() <= 0.002 + 1e-12)
        && (g.total() - 0.159).abs() <= 0.002 + 1e-12;
    check(
        ordered == caches as usize && worst_telescope <= 1e-12 && paper_ok,
        format!(
            "ordering held on {ordered}/{caches} caches, max telescoping error {worst_telescope:.1e}, published instance terms ({:+.3}, {:+.3}, {:+.3}, {:+.3}) sum {:+.3}",
            terms[0], terms[1], terms[2], terms[3], g.total()
        ),
    )
}

fn statistics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=12);
        let x: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..8) as f64 / 7.0)
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..8) as f64 / 7.0)
            .collect();
        let diffs: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let w = wilcoxon_signed_rank(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max((w.p_value - brute_force_p(&diffs)).abs());
    }
    let groups: Vec<Vec<f64>> = (0..30)
        .map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let a = bootstrap_ci(&groups, 4000, 0.95, 42).map_err(|e| e.to_string())?;
    let b = bootstrap_ci(&groups, 4000, 0.95, 42).map_err(|e| e.to_string())?;
    let bitwise = a.lo.to_bits() == b.lo.to_bits()
        && a.hi.to_bits() == b.hi.to_bits()
        && a.mean.to_bits() == b.mean.to_bits();
    let d_eff = effective_diversity(2, 0.489).map_err(|e| e.to_string())?;
    check(
        worst < 1e-12 && bitwise && (d_eff - 1.34).abs() <= 0.005,
        format!("max Wilcoxon |Δp| = {worst:.1e} over 200 fixtures, bootstrap bitwise {bitwise}, d_eff(2, 0.489) = {d_eff:.4}"),
    )
}

fn metric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let mut q = Vec::new();
        let mut c = Vec::new();
        for i in 0..n {
            let id = format!("t{i}");
            q.push(PairedSample::new(
                &id,
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                0,
            ));
            c.push(PairedSample::new(
                &id,
                rng.random_range(0.001..0.1),
                rng.random_range(0.001..0.1),
                0,
            ));
        }
        let g = coding_gain_and_efficiency(&q, &c).map_err(|e| e.to_string())?;
        worst = worst.max(
            (g.efficiency * g.rho - g.gain).abs() / f64::EPSILON.max(g.gain.abs() * f64::EPSILON),
        );
    }
    let blended = blended_score(0.86, 0.60).map_err(|e| e.to_string())?.value;
    check(
        worst <= 4.0 && (blended - 0.756).abs() <= 2.0 * f64::EPSILON,
        format!("max |ηρ − G| = {worst:.1} ulp, blended(0.86, 0.60) = {blended}"),
    )
}

fn write_pipeline_config(dir: &Path) -> std::io::Result<std::path::PathBuf> {
    let categories = ["qa", "reasoning", "code"];
    let tasks: Vec<String> = (0..10)
        .map(|i| {
            serde_json::json!({
                "id": format!("p{i:02}"),
                "prompt": format!("Pipeline question {i}: explain step {i} of the procedure."),
                "category": categories[i % 3],
            })
            .to_string()
        })
        .collect();
    std::fs::write(dir.join("tasks.jsonl"), tasks.join("\n"))?;
    let synth = |name: &str, base: f64, cost: f64, seed: u64| {
        serde_json::json!({
            "name": name, "backend": "synthetic", "model_id": name, "supports_logprobs": true,
            "synthetic": {"base_quality": base, "quality_noise_sd": 0.12, "branch_correlation": 0.3,
                          "cost_per_call": cost, "seed": seed}
        })
    };
    let cfg = serde_json::json!({
        "channels": [synth("small", 0.55, 0.001, 1), synth("medium", 0.65, 0.003, 2)],
        "judge": synth("judge", 0.8, 0.0005, 3),
        "tasks": "tasks.jsonl",
        "repeats": 2,
        "seed": 11,
        "cache_dir": "cache",
        "embedding": {"kind": "hash"},
        "techniques": [
            {"technique": "diversity_sc"},
            {"technique": "diversity_mrc"},
            {"technique": "harq_ir", "max_rounds": 3},
            {"technique": "turbo", "max_iterations": 3},
            {"technique": "fountain", "n_max": 6}
        ],
        "evaluation": {"lambdas": [0, 0.1, 1, 10], "n_boot": 500}
    });
    let path = dir.join("experiment.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap())?;
    Ok(path)
}

fn end_to_end_pipeline() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = write_pipeline_config(dir.path()).map_err(|e| e.to_string())?;
    let cfg = reliacode::harness::ExperimentConfig::load(&cfg_path).map_err(|e| e.to_string())?;
    let offline = cfg
        .channels
        .iter()
        .chain([&cfg.judge])
        .all(|c| c.synthetic.is_some() && c.endpoint_url.is_none());
    let start = Instant::now();
    for sub in ["run", "evaluate", "sweep-lambda"] {
        let out = Command::new(env!("CARGO_BIN_EXE_reliacode"))
            .arg(sub)
            .arg("--config")
            .arg(&cfg_path)
            .env("HTTP_PROXY", "http://127.0.0.1:9")
            .env("HTTPS_PROXY", "http://127.0.0.1:9")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "`{sub}` failed: {}",
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    let elapsed = start.elapsed();
    let results = dir.path().join("cache").join("results");
    let mut reader =
        csv::Reader::from_path(results.join("policy_table.csv")).map_err(|e| e.to_string())?;
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let col = headers
        .iter()
        .position(|h| h == "policy")
        .ok_or("no policy column")?;
    let rows: Vec<String> = reader
        .records()
        .map(|r| r.map(|r| r[col].to_string()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let expected = expected_policy_names(&cfg.evaluation);
    let sweep = results.join("lambda_sweep.csv").exists();
    check(
        offline && rows == expected && sweep && within(elapsed, 60.0),
        format!("{} policy rows (expected {}), sweep written {sweep}, synthetic only {offline}, {elapsed:.2?}", rows.len(), expected.len()),
    )
}

/// Optional: needs `RELIACODE_LIVE_ENDPOINT` and `RELIACODE_LIVE_MODELS`
/// (two comma-separated model ids); prices come from
/// `RELIACODE_LIVE_PRICE_IN` / `RELIACODE_LIVE_PRICE_OUT` per token.
fn live_smoke() -> Option<Outcome> {
    let endpoint = std::env::var("RELIACODE_LIVE_ENDPOINT").ok()?;
    Some(live_smoke_at(&endpoint))
}

fn live_smoke_at(endpoint: &str) -> Outcome {
    let models = std::env::var("RELIACODE_LIVE_MODELS")
        .map_err(|_| "RELIACODE_LIVE_MODELS is not set".to_string())?;
    let price = |k: &str, d: f64| {
        std::env::var(k)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(d)
    };
    let (pin, pout) = (
        price("RELIACODE_LIVE_PRICE_IN", 1e-6),
        price("RELIACODE_LIVE_PRICE_OUT", 2e-6),
    );
    let channels: Vec<ChannelRef> = models
        .split(',')
        .take(2)
        .map(|m| {
            let mut c = ChannelConfig::http(m.trim(), endpoint);
            c.price_per_input_token = pin;
            c.price_per_output_token = pout;
            build_channel(&c)
        })
        .collect::<reliacode::Result<_>>()
        .map_err(|e| e.to_string())?;
    if channels.len() != 2 {
        return Err("RELIACODE_LIVE_MODELS needs two model ids".into());
    }
    let pool =
        ChannelPool::new(channels.clone(), channels[0].clone()).map_err(|e| e.to_string())?;
    let s = scorer(&pool.judge);
    let mut ok = true;
    for i in 0..3 {
        let t = task(&format!("live{i}"));
        let ctx = RunContext::new(&t, &s, 0, 0);
        let r = reliacode::diversity::run_sc(&pool.channels, &ctx).map_err(|e| e.to_string())?;
        let outputs = r
            .individual_outputs
            .iter()
            .chain(&r.overhead_outputs)
            .chain(&r.judge_outputs);
        let from_tokens: f64 = outputs
            .map(|o| o.prompt_tokens as f64 * pin + o.completion_tokens as f64 * pout)
            .sum();
        ok &= r.total_cost == r.recomputed_cost()
            && (r.total_cost - from_tokens).abs() <= 1e-15 * (1.0 + from_tokens)
            && r.best_individual_score()
                .is_some_and(|b| r.final_quality >= b)
            && (0.0..=1.0).contains(&r.final_quality);
    }
    check(
        ok,
        format!("run_sc over 2 channels on 3 tasks at {endpoint}"),
    )
}

fn main() -> ExitCode {
    let criteria: Vec<(u32, &str, fn() -> Outcome)> = vec![
        (1, "crossover closed form", crossover_closed_form),
        (2, "crossover Monte Carlo", crossover_monte_carlo),
        (3, "threshold dynamics", threshold_dynamics),
        (4, "guard universality", guard_universality),
        (5, "fountain stopping", fountain_stopping),
        (6, "router limits", router_limits),
        (7, "policy ordering", policy_ordering),
        (8, "statistics oracles", statistics_oracles),
        (9, "metric identities", metric_identities),
        (10, "end-to-end synthetic pipeline", end_to_end_pipeline),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        match f() {
            Ok(detail) => println!("criterion {n}: PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL {name}: {detail}");
            }
        }
    }
    match live_smoke() {
        None => println!("criterion 11: SKIP live smoke: RELIACODE_LIVE_ENDPOINT not set"),
        Some(Ok(detail)) => println!("criterion 11: PASS live smoke: {detail}"),
        Some(Err(detail)) => {
            failed += 1;
            println!("criterion 11: FAIL live smoke: {detail}");
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
