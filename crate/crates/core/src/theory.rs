//! Closed-form diversity-combining SNRs, the CSI-noise crossover between
//! noisy-weight MRC and EGC, and the one-dimensional quality-update maps
//! that govern whether iterative refinement converges.
//!
//! The combiner model is the binary-signal linear combiner
//! `r_i = a_i s + n_i`, `n_i ~ N(0, sigma^2)`, with MRC weights estimated as
//! `â_i = a_i + e_i`, `e_i ~ N(0, sigma_w^2)`. Writing `S_k = sum a_i^k`:
//!
//! * `snr_mrc = S_2 / sigma^2`
//! * `snr_egc = S_1^2 / (d sigma^2)`
//! * `snr_mrc_noisy_csi ≈ S_2 (S_2 + sigma_w^2) / ((S_2 + d sigma_w^2) sigma^2)`
//! * the crossover `sigma_w*^2 = S_2 (d S_2 - S_1^2) / (d (S_1^2 - S_2))`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-branch amplitudes plus channel and CSI noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeProfile {
    pub amplitudes: Vec<f64>,
    pub sigma: f64,
    #[serde(default)]
    pub sigma_w: f64,
}

impl AmplitudeProfile {
    pub fn new(amplitudes: Vec<f64>, sigma: f64, sigma_w: f64) -> Result<Self> {
        let profile = Self {
            amplitudes,
            sigma,
            sigma_w,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.amplitudes.len() < 2 {
            return Err(Error::validation("amplitude profile needs d >= 2 branches"));
        }
        if self.amplitudes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::validation("amplitudes must be positive and finite"));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::validation("sigma must be positive"));
        }
        if !(self.sigma_w.is_finite() && self.sigma_w >= 0.0) {
            return Err(Error::validation("sigma_w must be non-negative"));
        }
        Ok(())
    }

    pub fn with_sigma_w(&self, sigma_w: f64) -> Self {
        Self {
            sigma_w,
            ..self.clone()
        }
    }

    pub fn d(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn power_sum(&self, k: i32) -> f64 {
        self.amplitudes.iter().map(|a| a.powi(k)).sum()
    }
}

pub fn snr_mrc(profile: &AmplitudeProfile) -> f64 {
    profile.power_sum(2) / profile.sigma.powi(2)
}

pub fn snr_egc(profile: &AmplitudeProfile) -> f64 {
    let s1 = profile.power_sum(1);
    s1 * s1 / (profile.d() as f64 * profile.sigma.powi(2))
}

/// First-order expected SNR of MRC driven by noisy amplitude estimates.
pub fn snr_mrc_noisy_csi(profile: &AmplitudeProfile) -> f64 {
    let s2 = profile.power_sum(2);
    let u = profile.sigma_w.powi(2);
    let d = profile.d() as f64;
    s2 * (s2 + u) / ((s2 + d * u) * profile.sigma.powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalVariance {
    pub value: f64,
    /// Set when all amplitudes are equal and the crossover collapses to 0.
    pub degenerate: bool,
}

/// The CSI-noise variance at which noisy-weight MRC and EGC tie.
pub fn critical_csi_variance(profile: &AmplitudeProfile) -> CriticalVariance {
    let d = profile.d() as f64;
    let s1 = profile.power_sum(1);
    let s2 = profile.power_sum(2);
    let first = profile.amplitudes[0];
    let all_equal = profile
        .amplitudes
        .iter()
        .all(|a| (a - first).abs() <= 1e-12 * first.max(1.0));
    if all_equal {
        return CriticalVariance {
            value: 0.0,
            degenerate: true,
        };
    }
    let numerator = s2 * (d * s2 - s1 * s1);
    let denominator = d * (s1 * s1 - s2);
    CriticalVariance {
        value: (numerator / denominator).max(0.0),
        degenerate: false,
    }
}

/// Monte Carlo estimate of both combiners' output SNR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossoverEstimate {
    pub mrc_noisy: f64,
    pub mrc_noisy_se: f64,
    pub egc: f64,
    pub egc_se: f64,
}

/// Simulates the binary-signal linear combiner with `s = +1`.
///
/// Noisy MRC: each trial draws fresh weights `â_i = a_i + e_i` and records
/// the output SNR conditioned on those weights,
/// `(sum â_i a_i)^2 / (sigma^2 sum â_i^2)`, i.e. the squared mean over the
/// variance of `sum â_i r_i` given `s = +1`. The reported value is the
/// average over trials. EGC uses `w_i = 1`; its output `sum r_i` is
/// simulated directly and the SNR is squared-mean over variance.
pub fn monte_carlo_crossover(
    profile: &AmplitudeProfile,
    n_trials: usize,
    seed: u64,
) -> Result<CrossoverEstimate> {
    profile.validate()?;
    if n_trials < 10_000 {
        return Err(Error::validation(
            "monte_carlo_crossover needs n_trials >= 1e4",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma2 = profile.sigma.powi(2);
    let channel_noise = Normal::new(0.0, profile.sigma).expect("sigma validated");

    let mut inst_sum = 0.0;
    let mut inst_sq = 0.0;
    let mut egc_sum = 0.0;
    let mut egc_sq = 0.0;
    for _ in 0..n_trials {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut egc_out = 0.0;
        for &a in &profile.amplitudes {
            let e: f64 = rng.sample::<f64, _>(StandardNormal) * profile.sigma_w;
            let w = a + e;
            num += w * a;
            den += w * w;
            egc_out += a + channel_noise.sample(&mut rng);
        }
        let inst = if den > 0.0 {
            num * num / (sigma2 * den)
        } else {
            0.0
        };
        inst_sum += inst;
        inst_sq += inst * inst;
        egc_sum += egc_out;
        egc_sq += egc_out * egc_out;
    }
    let n = n_trials as f64;
    let inst_mean = inst_sum / n;
    let inst_var = (inst_sq / n - inst_mean * inst_mean).max(0.0) * n / (n - 1.0);
    let egc_mean = egc_sum / n;
    let egc_var = (egc_sq / n - egc_mean * egc_mean).max(0.0) * n / (n - 1.0);
    let egc = egc_mean * egc_mean / egc_var;
    Ok(CrossoverEstimate {
        mrc_noisy: inst_mean,
        mrc_noisy_se: (inst_var / n).sqrt(),
        egc,
        // delta method for m^2/v under Gaussian output
        egc_se: ((4.0 * egc + 2.0 * egc * egc) / n).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma_w2: f64,
    pub analytic_mrc_noisy: f64,
    pub analytic_egc: f64,
    pub empirical_mrc_noisy: f64,
    pub empirical_egc: f64,
}

/// Evaluates both analytic and simulated SNRs over a grid of CSI variances.
pub fn crossover_sweep(
    profile: &AmplitudeProfile,
    sigma_w2_grid: &[f64],
    n_trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    sigma_w2_grid
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            if !(u >= 0.0) {
                return Err(Error::validation("sigma_w^2 grid must be non-negative"));
            }
            let p = profile.with_sigma_w(u.sqrt());
            let mc = monte_carlo_crossover(&p, n_trials, seed.wrapping_add(i as u64))?;
            Ok(SweepRow {
                sigma_w2: u,
                analytic_mrc_noisy: snr_mrc_noisy_csi(&p),
                analytic_egc: snr_egc(&p),
                empirical_mrc_noisy: mc.mrc_noisy,
                empirical_egc: mc.egc,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// A one-dimensional quality-update map on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum QualityMap {
    #[default]
    Identity,
    /// `q^exponent`
    Power { exponent: f64 },
    /// `intercept + slope * q`, clamped
    Affine { intercept: f64, slope: f64 },
    /// `1 / (1 + exp(-steepness (q - midpoint)))`
    Logistic { steepness: f64, midpoint: f64 },
    /// Linear interpolation through `(q, f(q))` knots sorted by `q`.
    PiecewiseLinear { knots: Vec<(f64, f64)> },
}

impl QualityMap {
    pub fn validate(&self) -> Result<()> {
        match self {
            QualityMap::Identity => Ok(()),
            QualityMap::Power { exponent } if *exponent > 0.0 && exponent.is_finite() => Ok(()),
            QualityMap::Power { .. } => Err(Error::validation("power map needs exponent > 0")),
            QualityMap::Affine { intercept, slope }
                if intercept.is_finite() && slope.is_finite() =>
            {
                Ok(())
            }
            QualityMap::Affine { .. } => {
                Err(Error::validation("affine map needs finite parameters"))
            }
            QualityMap::Logistic {
                steepness,
                midpoint,
            } if steepness.is_finite() && midpoint.is_finite() => Ok(()),
            QualityMap::Logistic { .. } => {
                Err(Error::validation("logistic map needs finite parameters"))
            }
            QualityMap::PiecewiseLinear { knots } => {
                if knots.len() < 2 {
                    return Err(Error::validation("piecewise map needs >= 2 knots"));
                }
                if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(Error::validation(
                        "piecewise knots must be strictly increasing",
                    ));
                }
                Ok(())
            }
        }
    }

    /// Applies the map and clamps the result into `[0, 1]`.
    pub fn apply(&self, q: f64) -> f64 {
        let q = q.clamp(0.0, 1.0);
        let y = match self {
            QualityMap::Identity => q,
            QualityMap::Power { exponent } => q.powf(*exponent),
            QualityMap::Affine { intercept, slope } => intercept + slope * q,
            QualityMap::Logistic {
                steepness,
                midpoint,
            } => 1.0 / (1.0 + (-steepness * (q - midpoint)).exp()),
            QualityMap::PiecewiseLinear { knots } => piecewise(knots, q),
        };
        y.clamp(0.0, 1.0)
    }

    /// Central-difference derivative, step 1e-5, one-sided at the borders.
    pub fn derivative(&self, q: f64) -> f64 {
        const H: f64 = 1e-5;
        let lo = (q - H).max(0.0);
        let hi = (q + H).min(1.0);
        (self.apply(hi) - self.apply(lo)) / (hi - lo)
    }

    /// Fixed points of the map found by sign changes of `f(q) - q` on a
    /// fine grid, refined by bisection. Exact endpoint fixed points are kept.
    pub fn fixed_points(&self) -> Vec<f64> {
        const GRID: usize = 2000;
        let g = |q: f64| self.apply(q) - q;
        let mut points: Vec<f64> = Vec::new();
        let push = |p: f64, points: &mut Vec<f64>| {
            if points.last().is_none_or(|last| (p - *last).abs() > 1e-6) {
                points.push(p);
            }
        };
        let mut prev_q = 0.0;
        let mut prev_g = g(0.0);
        if prev_g.abs() < 1e-12 {
            push(0.0, &mut points);
        }
        for i in 1..=GRID {
            let q = i as f64 / GRID as f64;
            let gq = g(q);
            if gq.abs() < 1e-12 {
                push(q, &mut points);
            } else if prev_g.abs() >= 1e-12 && prev_g.signum() != gq.signum() {
                let (mut lo, mut hi) = (prev_q, q);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if g(mid).signum() == g(lo).signum() {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                push(0.5 * (lo + hi), &mut points);
            }
            prev_q = q;
            prev_g = gq;
        }
        points
    }

    /// The highest fixed point in `(0, 1]` and `|f'|` there.
    pub fn upper_fixed_point(&self) -> Option<(f64, f64)> {
        self.fixed_points()
            .into_iter()
            .rfind(|&p| p > 0.0)
            .map(|p| (p, self.derivative(p).abs()))
    }
}

fn piecewise(knots: &[(f64, f64)], q: f64) -> f64 {
    if q <= knots[0].0 {
        return knots[0].1;
    }
    for w in knots.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if q <= x1 {
            return y0 + (y1 - y0) * (q - x0) / (x1 - x0);
        }
    }
    knots[knots.len() - 1].1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `q_0, q_1, ..., q_k_max`
    pub iterates: Vec<f64>,
    /// Best-of-sequence value after each step.
    pub running_max: Vec<f64>,
}

/// Iterates `q_{k+1} = clamp(f(x_k) + noise, 0, 1)`.
///
/// Without the guard `x_k = q_k`. With the guard the refinement is applied
/// to the best iterate seen so far (`x_k = running_max_k`), which is how the
/// iterative decoders refine their current best answer.
pub fn iterate_quality_map(
    map: &QualityMap,
    q0: f64,
    k_max: usize,
    noise_sd: f64,
    with_guard: bool,
    seed: u64,
) -> Result<Trajectory> {
    map.validate()?;
    if !(0.0..=1.0).contains(&q0) {
        return Err(Error::validation("q0 must lie in [0, 1]"));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::validation("noise_sd must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut iterates = vec![q0];
    let mut running_max = vec![q0];
    let mut q = q0;
    let mut best = q0;
    for _ in 0..k_max {
        let x = if with_guard { best } else { q };
        let noise = if noise_sd > 0.0 {
            noise_sd * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        q = (map.apply(x) + noise).clamp(0.0, 1.0);
        best = best.max(q);
        iterates.push(q);
        running_max.push(best);
    }
    Ok(Trajectory {
        iterates,
        running_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn a12() -> AmplitudeProfile {
        AmplitudeProfile::new(vec![1.0, 2.0], 1.0, 0.0).unwrap()
    }

    #[test]
    fn worked_profile_snrs() {
        let p = a12();
        assert_abs_diff_eq!(snr_mrc(&p), 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(snr_egc(&p), 4.5, epsilon = 1e-15);
    }

    #[test]
    fn equal_amplitudes_tie_and_flag_degenerate() {
        let p = AmplitudeProfile::new(vec![0.7; 4], 0.5, 0.0).unwrap();
        assert_abs_diff_eq!(snr_mrc(&p), snr_egc(&p), epsilon = 1e-12);
        let c = critical_csi_variance(&p);
        assert!(c.degenerate);
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn scaling_amplitudes_scales_snr_and_crossover_by_c_squared() {
        let p = a12();
        let scaled = AmplitudeProfile::new(vec![3.0, 6.0], 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(snr_mrc(&scaled), 9.0 * snr_mrc(&p), epsilon = 1e-12);
        assert_abs_diff_eq!(snr_egc(&scaled), 9.0 * snr_egc(&p), epsilon = 1e-12);
        assert_abs_diff_eq!(
            critical_csi_variance(&scaled).value,
            9.0 * critical_csi_variance(&p).value,
            epsilon = 1e-12
        );
    }

    #[test]
    fn crossover_for_worked_profile() {
        let c = critical_csi_variance(&a12());
        assert!(!c.degenerate);
        assert_eq!(c.value, 0.625);
        let at = a12().with_sigma_w(0.625f64.sqrt());
        assert_abs_diff_eq!(snr_mrc_noisy_csi(&at), 4.5, epsilon = 1e-12);
    }

    #[test]
    fn noisy_csi_limits() {
        let p = a12();
        assert_abs_diff_eq!(snr_mrc_noisy_csi(&p), snr_mrc(&p), epsilon = 1e-15);
        let far = p.with_sigma_w(1e6);
        assert_abs_diff_eq!(snr_mrc_noisy_csi(&far), snr_mrc(&p) / 2.0, epsilon = 1e-6);
    }

    #[test]
    fn monte_carlo_perfect_csi_matches_closed_form() {
        let p = AmplitudeProfile::new(vec![0.4, 0.9, 1.3], 0.8, 0.0).unwrap();
        let mc = monte_carlo_crossover(&p, 50_000, 11).unwrap();
        assert!((mc.mrc_noisy - snr_mrc(&p)).abs() <= 3.0 * mc.mrc_noisy_se + 1e-9);
        assert!((mc.egc - snr_egc(&p)).abs() <= 3.0 * mc.egc_se);
    }

    #[test]
    fn monte_carlo_rejects_small_trial_counts() {
        assert!(monte_carlo_crossover(&a12(), 100, 0).is_err());
    }

    #[test]
    fn quality_map_fixed_points() {
        let sqrt = QualityMap::Power { exponent: 0.5 };
        let (q, slope) = sqrt.upper_fixed_point().unwrap();
        assert_abs_diff_eq!(q, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(slope, 0.5, epsilon = 1e-3);
        let logistic = QualityMap::Logistic {
            steepness: 12.0,
            midpoint: 0.5,
        };
        // bistable: two stable ends and an unstable middle
        assert_eq!(logistic.fixed_points().len(), 3);
    }

    #[test]
    fn trajectory_at_fixed_point_is_constant() {
        let t = iterate_quality_map(&QualityMap::Power { exponent: 2.0 }, 1.0, 6, 0.0, false, 0)
            .unwrap();
        assert!(t.iterates.iter().all(|&q| q == 1.0));
    }

    #[test]
    fn sqrt_map_contracts_at_rate_one_half() {
        let t = iterate_quality_map(&QualityMap::Power { exponent: 0.5 }, 0.5, 12, 0.0, false, 0)
            .unwrap();
        let gaps: Vec<f64> = t.iterates.iter().map(|q| 1.0 - q).collect();
        let ratio = gaps[12] / gaps[11];
        assert!((ratio - 0.5).abs() < 1e-3, "ratio {ratio}");
    }

    #[test]
    fn squared_map_descends_while_guard_holds() {
        let t = iterate_quality_map(&QualityMap::Power { exponent: 2.0 }, 0.9, 8, 0.0, false, 0)
            .unwrap();
        assert!(t.iterates.windows(2).all(|w| w[1] < w[0]));
        assert!(t.running_max.iter().all(|&m| m == 0.9));
    }
}
