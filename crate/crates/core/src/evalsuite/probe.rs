use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub l2_strength: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { l2_strength: 1e-4, max_iters: 2000, tol: 1e-6 }
    }
}

/// Per-dimension z-scoring fitted on training features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || features.is_empty() || features.len() % dim != 0 {
            return Err(CoreError::Invalid(format!("{} values do not form rows of {dim}", features.len())));
        }
        let n = (features.len() / dim) as f64;
        let mut mean = vec![0.0; dim];
        for row in features.chunks(dim) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for row in features.chunks(dim) {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, features: &[f64]) -> Vec<f64> {
        let dim = self.mean.len();
        let mut out = features.to_vec();
        for row in out.chunks_mut(dim) {
            for ((x, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        out
    }
}

/// Multinomial logistic regression: `logits = x W + b`, `W` row-major `dim x classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub dim: usize,
    pub n_classes: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: Vec<String>,
    pub objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl ProbeModel {
    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        logits(&self.weights, &self.bias, features, self.dim, self.n_classes)
    }

    pub fn predict(&self, features: &[f64]) -> Vec<usize> {
        self.logits(features)
            .chunks(self.n_classes)
            .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
            .collect()
    }
}

fn logits(w: &[f64], b: &[f64], x: &[f64], dim: usize, k: usize) -> Vec<f64> {
    let n = x.len() / dim;
    let mut out = Vec::with_capacity(n * k);
    for row in x.chunks(dim) {
        let mut z = b.to_vec();
        for (i, &xi) in row.iter().enumerate() {
            if xi != 0.0 {
                for (zc, &wc) in z.iter_mut().zip(&w[i * k..(i + 1) * k]) {
                    *zc += xi * wc;
                }
            }
        }
        out.extend(z);
    }
    out
}

/// `mean CE + l2/2 * |W|^2` and, when `grad` is given, its gradient
/// (weights first, then bias).
pub fn probe_objective(
    params: &[f64],
    features: &[f64],
    labels: &[usize],
    dim: usize,
    k: usize,
    l2: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let (w, b) = params.split_at(dim * k);
    let n = labels.len();
    let z = logits(w, b, features, dim, k);
    let mut ce = 0.0;
    let mut dz = vec![0.0; n * k];
    for ((row, d), &y) in z.chunks(k).zip(dz.chunks_mut(k)).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        ce += m + s.ln() - row[y];
        for (c, dc) in d.iter_mut().enumerate() {
            *dc = (row[c] - m).exp() / s / n as f64;
        }
        d[y] -= 1.0 / n as f64;
    }
    let reg = 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    if let Some(g) = grad {
        g.iter_mut().for_each(|v| *v = 0.0);
        let (gw, gb) = g.split_at_mut(dim * k);
        for (row, d) in features.chunks(dim).zip(dz.chunks(k)) {
            for (i, &xi) in row.iter().enumerate() {
                for (gc, &dc) in gw[i * k..(i + 1) * k].iter_mut().zip(d) {
                    *gc += xi * dc;
                }
            }
            for (gc, &dc) in gb.iter_mut().zip(d) {
                *gc += dc;
            }
        }
        for (gc, &wc) in gw.iter_mut().zip(w) {
            *gc += l2 * wc;
        }
    }
    ce / n as f64 + reg
}

/// Full-batch gradient descent with Armijo backtracking from zero weights.
pub fn train_linear_probe(
    features: &[f64],
    labels: &[usize],
    n_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    train_linear_probe_from(features, labels, n_classes, config, None)
}

/// As [`train_linear_probe`], starting from `init` (weights then bias).
pub fn train_linear_probe_from(
    features: &[f64],
    labels: &[usize],
    n_classes: usize,
    config: &ProbeConfig,
    init: Option<&[f64]>,
) -> Result<ProbeModel> {
    let n = labels.len();
    if n == 0 || features.len() % n != 0 {
        return Err(CoreError::Invalid(format!("{} feature values for {n} labels", features.len())));
    }
    let dim = features.len() / n;
    if dim == 0 || n < n_classes {
        return Err(CoreError::Invalid(format!("need at least {n_classes} examples of positive dimension")));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(CoreError::Invalid(format!("label {bad} outside {n_classes} classes")));
    }
    let present: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if present.len() < 2 {
        return Err(CoreError::Invalid("probe training data contains a single class".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("probe features".into()));
    }
    if !(config.l2_strength >= 0.0) || config.tol < 0.0 {
        return Err(CoreError::Invalid("l2_strength and tol must be nonnegative".into()));
    }
    let np = dim * n_classes + n_classes;
    let mut x = match init {
        Some(v) if v.len() == np => v.to_vec(),
        Some(v) => return Err(CoreError::Invalid(format!("init has {} values, expected {np}", v.len()))),
        None => vec![0.0; np],
    };
    let l2 = config.l2_strength;
    let mut g = vec![0.0; np];
    let mut f = probe_objective(&x, features, labels, dim, n_classes, l2, Some(&mut g));
    let mut step: f64 = 1.0;
    let mut iterations = 0;
    let mut gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut trial = vec![0.0; np];
    while iterations < config.max_iters && gnorm >= config.tol {
        step = (step * 2.0).min(1e6);
        let g2 = gnorm * gnorm;
        loop {
            for ((t, &xi), &gi) in trial.iter_mut().zip(&x).zip(&g) {
                *t = xi - step * gi;
            }
            let ft = probe_objective(&trial, features, labels, dim, n_classes, l2, None);
            if ft <= f - 0.5 * step * g2 {
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                break;
            }
        }
        if step < 1e-20 {
            break;
        }
        std::mem::swap(&mut x, &mut trial);
        f = probe_objective(&x, features, labels, dim, n_classes, l2, Some(&mut g));
        gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        iterations += 1;
    }
    let bias = x.split_off(dim * n_classes);
    Ok(ProbeModel {
        dim,
        n_classes,
        weights: x,
        bias,
        classes: (0..n_classes).map(|c| c.to_string()).collect(),
        objective: f,
        iterations,
        grad_norm: gnorm,
    })
}
