//! Seeded bootstrap intervals, Pearson correlation and the paired Wilcoxon
//! signed-rank test.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const DEFAULT_BOOTSTRAP_SAMPLES: usize = 4000;
pub const EXACT_WILCOXON_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::validation("confidence level must lie in (0, 1)"));
    }
    Ok(())
}

/// Two-stage percentile bootstrap: resample tasks with replacement, then one
/// repeat within each sampled task. The point estimate is the mean of task
/// means.
pub fn bootstrap_ci(
    groups: &[Vec<f64>],
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi> {
    check_level(level)?;
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(Error::validation(
            "bootstrap needs at least one non-empty task group",
        ));
    }
    if n_boot == 0 {
        return Err(Error::validation("bootstrap needs at least one resample"));
    }
    let n = groups.len();
    let mean = groups
        .iter()
        .map(|g| g.iter().sum::<f64>() / g.len() as f64)
        .sum::<f64>()
        / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let mut s = 0.0;
        for _ in 0..n {
            let g = &groups[rng.random_range(0..n)];
            s += g[rng.random_range(0..g.len())];
        }
        stats.push(s / n as f64);
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        mean,
        lo: quantile(&stats, tail),
        hi: quantile(&stats, 1.0 - tail),
    })
}

fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in pairs {
        sab += (a - ma) * (b - mb);
        saa += (a - ma).powi(2);
        sbb += (b - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Pearson r with a percentile bootstrap interval over tasks. Resamples with
/// a constant margin are skipped.
pub fn branch_correlation(
    pairs: &[(f64, f64)],
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<Correlation> {
    check_level(level)?;
    if pairs.len() < 3 {
        return Err(Error::validation(
            "branch correlation needs at least 3 pairs",
        ));
    }
    let r = pearson(pairs)
        .ok_or_else(|| Error::Undefined("a branch has zero score variance".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_boot);
    let mut buf = vec![(0.0, 0.0); pairs.len()];
    for _ in 0..n_boot {
        for slot in buf.iter_mut() {
            *slot = pairs[rng.random_range(0..pairs.len())];
        }
        if let Some(v) = pearson(&buf) {
            stats.push(v);
        }
    }
    if stats.is_empty() {
        return Ok(Correlation { r, lo: r, hi: r });
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(Correlation {
        r,
        lo: quantile(&stats, tail),
        hi: quantile(&stats, 1.0 - tail),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// `min(W+, W-)`; `None` when every difference is zero.
    pub statistic: Option<f64>,
    pub w_plus: f64,
    pub n_nonzero: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Average ranks of `|d|`, 1-based.
pub fn signed_ranks(diffs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    let mut ranks = vec![0.0; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided p of `W+` under the exact null. Ranks are halves of integers,
/// so the distribution is counted over doubled ranks.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all: f64 = 2f64.powi(ranks.len() as i32);
    let w = (w_plus * 2.0).round() as usize;
    let lower: f64 = counts[..=w].iter().sum();
    let upper: f64 = counts[w..].iter().sum();
    (2.0 * lower.min(upper) / all).min(1.0)
}

/// Paired signed-rank test on `x - y`. Zero differences are dropped; tied
/// magnitudes share their average rank. Exact for up to 25 non-zero
/// differences, otherwise a tie-corrected normal approximation.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<Wilcoxon> {
    if x.len() != y.len() {
        return Err(Error::validation("paired samples differ in length"));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(Wilcoxon {
            statistic: None,
            w_plus: 0.0,
            n_nonzero: 0,
            p_value: 1.0,
            exact: true,
        });
    }
    let ranks = signed_ranks(&diffs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = n as f64 * (n as f64 + 1.0) / 2.0;
    let statistic = Some(w_plus.min(total - w_plus));
    if n <= EXACT_WILCOXON_MAX_N {
        return Ok(Wilcoxon {
            statistic,
            w_plus,
            n_nonzero: n,
            p_value: exact_p(&ranks, w_plus),
            exact: true,
        });
    }
    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = (w_plus - mu) / var.sqrt();
        let normal = Normal::standard();
        (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0)
    };
    Ok(Wilcoxon {
        statistic,
        w_plus,
        n_nonzero: n,
        p_value,
        exact: false,
    })
}

/// Cohen's `d_z`: mean paired difference over its sample standard deviation.
pub fn paired_effect_size(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (sd > 0.0).then(|| m / sd)
}

/// Share of pairs where `x` beats `y`, ties counting one half.
pub fn win_rate(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.is_empty() {
        return None;
    }
    let score: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Some(score / x.len() as f64)
}
