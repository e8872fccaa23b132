use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reliacode::harness::export::{
    evaluate_experiment, load_records_for, sweep_experiment, technique_summary, write_sweep,
    write_technique_summary,
};
use reliacode::harness::{run_experiment, write_policy_table, Experiment, ExperimentConfig};
use reliacode::theory::{
    critical_csi_variance, crossover_sweep, iterate_quality_map, snr_egc, snr_mrc,
    snr_mrc_noisy_csi, write_sweep_csv, AmplitudeProfile, QualityMap,
};
use reliacode::Result;

#[derive(Parser)]
#[command(
    name = "reliacode",
    version,
    about = "Reliability coding experiments over LLM channels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (JSON).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every missing (task, technique, repeat) run.
    Run(ConfigArg),
    /// Compare routing policies on a completed cache.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory; defaults to `<cache_dir>/results`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trace the quality/cost frontier of the nearest-neighbor router.
    SweepLambda {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated λ values; defaults to the config grid.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Output CSV; defaults to `<cache_dir>/results/lambda_sweep.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form validators.
    #[command(subcommand)]
    Theory(TheoryCommand),
    /// Per-technique summary tables.
    Export {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Combining SNRs and the CSI-noise crossover for an amplitude profile.
    Crossover {
        #[arg(long, value_delimiter = ',', required = true)]
        amplitudes: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Comma-separated CSI variances to simulate.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output for the simulated grid; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed points and a trajectory of a quality-update map.
    Threshold {
        /// Map as JSON, e.g. `{"kind":"power","exponent":0.5}`.
        #[arg(long)]
        map: String,
        #[arg(long, default_value_t = 0.5)]
        q0: f64,
        #[arg(long, default_value_t = 12)]
        iterations: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long)]
        guard: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn results_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.cache_dir.join("results"))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => {
            let cfg = ExperimentConfig::load(&c.config)?;
            let exp = Experiment::from_config(cfg)?;
            let s = run_experiment(&exp)?;
            println!(
                "new records: {}, skipped: {}, failed: {}, pilot probes: {}",
                s.new_records, s.skipped, s.failed, s.new_pilots
            );
        }
        Command::Evaluate { config, out } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let table = evaluate_experiment(&cfg)?;
            let dir = results_dir(&cfg, out);
            write_policy_table(&table, &dir)?;
            println!(
                "{:<28} {:>8} {:>18} {:>10} {:>8}",
                "policy", "q", "95% CI", "cost/task", "rho"
            );
            for r in &table.rows {
                println!(
                    "{:<28} {:>8.4} [{:>7.4}, {:>7.4}] {:>10.6} {:>7.2}x",
                    r.policy, r.quality, r.ci_lo, r.ci_hi, r.cost_per_task, r.rho
                );
            }
            println!("wrote {}", dir.join("policy_table.csv").display());
        }
        Command::SweepLambda {
            config,
            lambdas,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let lambdas = lambdas.unwrap_or_else(|| cfg.evaluation.lambdas.clone());
            let rows = sweep_experiment(&cfg, &lambdas)?;
            let path = out.unwrap_or_else(|| results_dir(&cfg, None).join("lambda_sweep.csv"));
            write_sweep(&rows, &path)?;
            for r in &rows {
                println!(
                    "lambda={:<10} q={:.4} cost={:.6} rho={:.3}",
                    r.lambda, r.mean_quality, r.mean_cost, r.mean_normalized_cost
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Export { config, out } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let records = load_records_for(&cfg)?;
            let rows = technique_summary(
                &records,
                cfg.evaluation.n_boot,
                cfg.evaluation.level,
                cfg.seed,
            )?;
            let dir = results_dir(&cfg, out);
            write_technique_summary(&rows, &dir)?;
            println!("wrote {}", dir.join("technique_summary.csv").display());
        }
        Command::Theory(TheoryCommand::Crossover {
            amplitudes,
            sigma,
            grid,
            trials,
            seed,
            out,
        }) => {
            let profile = AmplitudeProfile::new(amplitudes, sigma, 0.0)?;
            let crit = critical_csi_variance(&profile);
            println!("snr_mrc = {:.6}", snr_mrc(&profile));
            println!("snr_egc = {:.6}", snr_egc(&profile));
            println!(
                "critical sigma_w^2 = {:.9}{}",
                crit.value,
                if crit.degenerate {
                    " (equal amplitudes: MRC and EGC coincide)"
                } else {
                    ""
                }
            );
            let at = profile.with_sigma_w(crit.value.sqrt());
            println!("snr_mrc_noisy at critical = {:.9}", snr_mrc_noisy_csi(&at));
            if let Some(grid) = grid {
                let rows = crossover_sweep(&profile, &grid, trials, seed)?;
                match out {
                    Some(p) => write_sweep_csv(&rows, std::fs::File::create(p)?)?,
                    None => write_sweep_csv(&rows, std::io::stdout())?,
                }
            }
        }
        Command::Theory(TheoryCommand::Threshold {
            map,
            q0,
            iterations,
            noise,
            guard,
            seed,
        }) => {
            let map: QualityMap = serde_json::from_str(&map)?;
            map.validate()?;
            println!("fixed points: {:?}", map.fixed_points());
            match map.upper_fixed_point() {
                Some((q, slope)) => println!(
                    "upper fixed point q = {q:.6}, |f'(q)| = {slope:.6} ({})",
                    if slope < 1.0 {
                        "contractive"
                    } else {
                        "expansive"
                    }
                ),
                None => println!("no fixed point in (0, 1]"),
            }
            let t = iterate_quality_map(&map, q0, iterations, noise, guard, seed)?;
            for (k, (q, m)) in t.iterates.iter().zip(&t.running_max).enumerate() {
                println!("k={k:<3} q={q:.6} best={m:.6}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
