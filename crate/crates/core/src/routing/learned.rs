//! Parametric router ablations: a multinomial logit on `[1, d, 1_cat]` that
//! predicts the per-task best technique, and per-technique ridge regressions
//! of quality on extended features.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::features::{
    basic_feature_names, basic_features, extended_feature_names, extended_features,
};
use super::knn::CacheEntry;
use crate::error::{Error, Result};

pub const MAX_NEWTON_ITERATIONS: usize = 500;
pub const GRADIENT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    MultinomialLogit,
    Ridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterWeights {
    pub kind: RouterKind,
    pub feature_spec: Vec<String>,
    /// Class (logit) or technique (ridge) names, one per coefficient row.
    pub classes: Vec<String>,
    /// Logit: one row per class, the first is the all-zero reference row.
    /// Ridge: one coefficient vector per technique.
    pub coefficients: Vec<Vec<f64>>,
    pub l2_penalty: f64,
    /// Single-class training data; the router always returns that class.
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub training_accuracy: Option<f64>,
    #[serde(default)]
    pub fold_metrics: Option<Vec<f64>>,
}

impl RouterWeights {
    pub fn features(&self, entry: &CacheEntry) -> Vec<f64> {
        match self.kind {
            RouterKind::MultinomialLogit => basic_features(entry.difficulty, entry.category),
            RouterKind::Ridge => extended_features(entry.difficulty, entry.category, &entry.prompt),
        }
    }

    /// Linear scores per class: logits for the logit router, predicted
    /// quality for ridge.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.coefficients
            .iter()
            .map(|w| w.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> &str {
        let s = self.scores(x);
        let mut best = 0;
        for (i, v) in s.iter().enumerate() {
            if *v > s[best] {
                best = i;
            }
        }
        &self.classes[best]
    }

    pub fn dispatch(&self, entry: &CacheEntry) -> &str {
        self.predict(&self.features(entry))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn check_l2(l2: f64) -> Result<()> {
    if !(l2 > 0.0 && l2.is_finite()) {
        return Err(Error::validation("l2 penalty must be positive and finite"));
    }
    Ok(())
}

fn softmax_rest(theta: &DVector<f64>, x: &DVector<f64>, k: usize, p: usize) -> Vec<f64> {
    let mut logits = vec![0.0; k];
    for c in 1..k {
        logits[c] = theta.rows((c - 1) * p, p).dot(x);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn logit_objective(
    theta: &DVector<f64>,
    xs: &[DVector<f64>],
    ys: &[usize],
    k: usize,
    p: usize,
    l2: f64,
) -> f64 {
    let mut f = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        f -= softmax_rest(theta, x, k, p)[y].max(f64::MIN_POSITIVE).ln();
    }
    for c in 0..k - 1 {
        for j in 1..p {
            f += 0.5 * l2 * theta[c * p + j].powi(2);
        }
    }
    f
}

/// L2-penalized multinomial logit by damped Newton. The intercept is not
/// penalized, so a large penalty recovers the class prior.
pub fn fit_logit_router(cache: &[CacheEntry], l2: f64) -> Result<RouterWeights> {
    check_l2(l2)?;
    if cache.is_empty() {
        return Err(Error::validation("cannot fit a router on an empty cache"));
    }
    let labels: Vec<&str> = cache.iter().map(|e| e.best_technique()).collect();
    let classes: Vec<String> = labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(String::from)
        .collect();
    let feature_spec = basic_feature_names();
    let p = feature_spec.len();
    let k = classes.len();
    if k == 1 {
        return Ok(RouterWeights {
            kind: RouterKind::MultinomialLogit,
            feature_spec,
            classes,
            coefficients: vec![vec![0.0; p]],
            l2_penalty: l2,
            degenerate: true,
            iterations: 0,
            training_accuracy: Some(1.0),
            fold_metrics: None,
        });
    }
    let ys: Vec<usize> = labels
        .iter()
        .map(|l| {
            classes
                .iter()
                .position(|c| c == l)
                .expect("label in classes")
        })
        .collect();
    let xs: Vec<DVector<f64>> = cache
        .iter()
        .map(|e| DVector::from_vec(basic_features(e.difficulty, e.category)))
        .collect();
    let dim = p * (k - 1);
    let mut theta = DVector::<f64>::zeros(dim);
    let mut iterations = 0;
    for it in 0..MAX_NEWTON_ITERATIONS {
        iterations = it + 1;
        let mut grad = DVector::<f64>::zeros(dim);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        for (x, &y) in xs.iter().zip(&ys) {
            let pi = softmax_rest(&theta, x, k, p);
            let outer = x * x.transpose();
            for a in 1..k {
                let ind = if y == a { 1.0 } else { 0.0 };
                let mut g = grad.rows_mut((a - 1) * p, p);
                g += x * (pi[a] - ind);
                for b in 1..k {
                    let w = pi[a] * (if a == b { 1.0 } else { 0.0 } - pi[b]);
                    let mut block = hess.view_mut(((a - 1) * p, (b - 1) * p), (p, p));
                    block += &outer * w;
                }
            }
        }
        for c in 0..k - 1 {
            for j in 1..p {
                let i = c * p + j;
                grad[i] += l2 * theta[i];
                hess[(i, i)] += l2;
            }
        }
        if grad.norm() < GRADIENT_TOLERANCE {
            break;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => hess
                .lu()
                .solve(&grad)
                .ok_or_else(|| Error::validation("singular Hessian in logit fit"))?,
        };
        let f0 = logit_objective(&theta, &xs, &ys, k, p, l2);
        let mut t = 1.0;
        let mut next = &theta - &step * t;
        while logit_objective(&next, &xs, &ys, k, p, l2) > f0 - 1e-4 * t * grad.dot(&step)
            && t > 1e-10
        {
            t *= 0.5;
            next = &theta - &step * t;
        }
        theta = next;
    }
    let mut coefficients = vec![vec![0.0; p]];
    for c in 0..k - 1 {
        coefficients.push(theta.rows(c * p, p).iter().copied().collect());
    }
    let mut weights = RouterWeights {
        kind: RouterKind::MultinomialLogit,
        feature_spec,
        classes,
        coefficients,
        l2_penalty: l2,
        degenerate: false,
        iterations,
        training_accuracy: None,
        fold_metrics: None,
    };
    let correct = cache
        .iter()
        .zip(&labels)
        .filter(|(e, l)| weights.dispatch(e) == **l)
        .count();
    weights.training_accuracy = Some(correct as f64 / cache.len() as f64);
    Ok(weights)
}

/// Closed-form ridge regression per technique with an unpenalized intercept.
pub fn fit_ridge_router(cache: &[CacheEntry], l2: f64) -> Result<RouterWeights> {
    check_l2(l2)?;
    let techniques: BTreeSet<&str> = cache
        .iter()
        .flat_map(|e| e.per_technique.keys().map(String::as_str))
        .collect();
    if techniques.is_empty() {
        return Err(Error::validation("cannot fit a router on an empty cache"));
    }
    let feature_spec = extended_feature_names();
    let p = feature_spec.len();
    let mut classes = Vec::new();
    let mut coefficients = Vec::new();
    for t in techniques {
        let rows: Vec<(&CacheEntry, f64)> = cache
            .iter()
            .filter_map(|e| e.per_technique.get(t).map(|s| (e, s.quality)))
            .collect();
        if rows.len() < 2 {
            return Err(Error::validation(format!(
                "technique {t} needs at least 2 cache entries"
            )));
        }
        let n = rows.len();
        let x = DMatrix::from_fn(n, p, |i, j| {
            let e = rows[i].0;
            extended_features(e.difficulty, e.category, &e.prompt)[j]
        });
        let y = DVector::from_iterator(n, rows.iter().map(|r| r.1));
        let mut a = x.transpose() * &x;
        for j in 1..p {
            a[(j, j)] += l2;
        }
        let b = x.transpose() * y;
        let beta = match a.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => a.lu().solve(&b).ok_or_else(|| {
                Error::validation(format!("singular normal matrix for technique {t}"))
            })?,
        };
        classes.push(t.to_string());
        coefficients.push(beta.iter().copied().collect());
    }
    let mut weights = RouterWeights {
        kind: RouterKind::Ridge,
        feature_spec,
        classes,
        coefficients,
        l2_penalty: l2,
        degenerate: false,
        iterations: 0,
        training_accuracy: None,
        fold_metrics: None,
    };
    let correct = cache
        .iter()
        .filter(|e| weights.dispatch(e) == e.best_technique())
        .count();
    weights.training_accuracy = Some(correct as f64 / cache.len() as f64);
    Ok(weights)
}
