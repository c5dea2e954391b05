//! Linear interpolation between embeddings and concept activation vectors.

use serde::{Deserialize, Serialize};

use crate::embed::{dot, l2_normalize, SpaceKind};
use crate::error::{ElmError, Result};

fn same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(ElmError::config(format!(
            "vector dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `(1 − α)·a + α·b`.
pub fn interpolate(a: &[f64], b: &[f64], alpha: f64) -> Result<Vec<f64>> {
    same_dim(a, b)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ElmError::config(format!(
            "interpolation alpha {alpha} outside [0, 1]"
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
        .collect())
}

/// Re-normalizes semantic vectors to unit length; behavioral vectors pass
/// through unchanged. Vectors already of unit norm (within 1e-12) are kept
/// bit-identical.
pub fn conform(space: SpaceKind, mut v: Vec<f64>) -> Result<Vec<f64>> {
    if space == SpaceKind::Semantic && (dot(&v, &v).sqrt() - 1.0).abs() > 1e-12 {
        l2_normalize(&mut v)?;
    }
    Ok(v)
}

/// Concept activation vector: unit direction of a linear attribute probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub attr: String,
    pub space: SpaceKind,
    pub dir: Vec<f64>,
    /// Held-out classification accuracy.
    pub acc: f64,
    /// Raw probe weights and bias (score = w·x + b), before normalization.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<f64>,
    #[serde(default)]
    pub bias: f64,
}

impl Cav {
    /// Logistic-probe score of `x`.
    pub fn score(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavConfig {
    /// L2 penalty on the weights (not the bias).
    pub lambda: f64,
    /// Every `holdout_every`-th sample is held out for the accuracy.
    pub holdout_every: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CavConfig {
    fn default() -> Self {
        CavConfig {
            lambda: 1e-3,
            holdout_every: 5,
            tol: 1e-8,
            max_iter: 200_000,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean logistic loss plus `λ/2·‖w‖²`, and its gradient (weights then bias).
fn objective(xs: &[&[f64]], ys: &[f64], w: &[f64], b: f64, lambda: f64) -> (f64, Vec<f64>) {
    let n = xs.len() as f64;
    let mut grad = vec![0.0; w.len() + 1];
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = dot(w, x) + b;
        loss += softplus(z) - y * z;
        let r = (sigmoid(z) - y) / n;
        for (g, xi) in grad.iter_mut().zip(x.iter()) {
            *g += r * xi;
        }
        grad[w.len()] += r;
    }
    loss /= n;
    loss += 0.5 * lambda * dot(w, w);
    for (g, wi) in grad.iter_mut().zip(w) {
        *g += lambda * wi;
    }
    (loss, grad)
}

/// Full-batch gradient descent with backtracking on the regularized
/// logistic loss, stopping when the gradient norm falls below `tol`.
fn fit_logistic(xs: &[&[f64]], ys: &[f64], cfg: &CavConfig) -> (Vec<f64>, f64) {
    let dim = xs[0].len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut step = 1.0;
    let (mut loss, mut grad) = objective(xs, ys, &w, b, cfg.lambda);
    for _ in 0..cfg.max_iter {
        let gn2 = dot(&grad, &grad);
        if gn2.sqrt() < cfg.tol {
            break;
        }
        step *= 2.0;
        loop {
            let w2: Vec<f64> = w.iter().zip(&grad).map(|(wi, g)| wi - step * g).collect();
            let b2 = b - step * grad[dim];
            let (l2, g2) = objective(xs, ys, &w2, b2, cfg.lambda);
            if l2 <= loss - 0.5 * step * gn2 || step < 1e-12 {
                w = w2;
                b = b2;
                loss = l2;
                grad = g2;
                break;
            }
            step *= 0.5;
        }
    }
    (w, b)
}

/// Trains a logistic probe on `rows` with boolean `labels`; the direction is
/// the normalized weight vector, oriented so that positives project higher
/// on average. Accuracy is measured on every `holdout_every`-th sample, the
/// rest being used for fitting.
pub fn cav_train(
    attr: &str,
    space: SpaceKind,
    rows: &[Vec<f64>],
    labels: &[bool],
    cfg: &CavConfig,
) -> Result<Cav> {
    if rows.len() != labels.len() || rows.is_empty() {
        return Err(ElmError::config("one label per row required"));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(ElmError::config("rows differ in dimension"));
    }
    let every = cfg.holdout_every.max(2);
    let is_held = |i: usize| i % every == every - 1;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, (r, &l)) in rows.iter().zip(labels).enumerate() {
        if !is_held(i) {
            xs.push(r.as_slice());
            ys.push(if l { 1.0 } else { 0.0 });
        }
    }
    let pos = ys.iter().filter(|&&y| y == 1.0).count();
    if pos == 0 || pos == ys.len() {
        return Err(ElmError::degenerate(format!(
            "attribute {attr}: training labels contain a single class"
        )));
    }
    let (mut weights, mut bias) = fit_logistic(&xs, &ys, cfg);
    let mean_proj = |want: bool| -> f64 {
        let sel: Vec<f64> = rows
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == want)
            .map(|(r, _)| dot(&weights, r))
            .collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    };
    if mean_proj(true) < mean_proj(false) {
        weights.iter_mut().for_each(|w| *w = -*w);
        bias = -bias;
    }
    let mut dir = weights.clone();
    l2_normalize(&mut dir)?;
    let held: Vec<usize> = (0..rows.len()).filter(|&i| is_held(i)).collect();
    let acc = if held.is_empty() {
        f64::NAN
    } else {
        held.iter()
            .filter(|&&i| (dot(&weights, &rows[i]) + bias > 0.0) == labels[i])
            .count() as f64
            / held.len() as f64
    };
    Ok(Cav {
        attr: attr.to_string(),
        space,
        dir,
        acc,
        weights,
        bias,
    })
}

/// `w + α·c` (re-normalized for semantic vectors).
pub fn cav_extrapolate(w: &[f64], space: SpaceKind, cav: &Cav, alpha: f64) -> Result<Vec<f64>> {
    if space != cav.space {
        return Err(ElmError::config(format!(
            "CAV for {} applied to a {space} vector",
            cav.space
        )));
    }
    same_dim(w, &cav.dir)?;
    if !alpha.is_finite() {
        return Err(ElmError::config("extrapolation alpha must be finite"));
    }
    conform(
        space,
        w.iter().zip(&cav.dir).map(|(x, c)| x + alpha * c).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::cosine;
    use crate::rng::SplitMix64;

    #[test]
    fn interpolation_endpoints_and_symmetry() {
        let a = [1.0, 2.0, -1.0];
        let b = [0.5, -3.0, 4.0];
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a.to_vec());
        assert_eq!(interpolate(&a, &a, 0.3).unwrap(), a.to_vec());
        let x = interpolate(&a, &b, 0.25).unwrap();
        let y = interpolate(&b, &a, 0.75).unwrap();
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() < 1e-15);
        }
        assert!(interpolate(&a, &[1.0], 0.5).is_err());
        assert!(interpolate(&a, &b, 1.5).is_err());
    }

    fn toy() -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = SplitMix64::stream(1, "cav-toy");
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let pos = i % 2 == 0;
            let shift = if pos { 1.5 } else { -1.5 };
            rows.push(vec![shift + 0.3 * rng.normal(), rng.normal()]);
            labels.push(pos);
        }
        (rows, labels)
    }

    #[test]
    fn separable_toy_is_classified_exactly() {
        let (rows, labels) = toy();
        let cav = cav_train(
            "x",
            SpaceKind::Behavioral,
            &rows,
            &labels,
            &CavConfig::default(),
        )
        .unwrap();
        assert_eq!(cav.acc, 1.0);
        assert!((dot(&cav.dir, &cav.dir) - 1.0).abs() < 1e-9);
        assert!(cav.dir[0] > 0.9);
    }

    #[test]
    fn flipped_labels_flip_direction() {
        let (rows, labels) = toy();
        let cfg = CavConfig::default();
        let a = cav_train("x", SpaceKind::Behavioral, &rows, &labels, &cfg).unwrap();
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let b = cav_train("x", SpaceKind::Behavioral, &rows, &flipped, &cfg).unwrap();
        assert!((cosine(&a.dir, &b.dir) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_class_is_rejected() {
        let (rows, _) = toy();
        let labels = vec![true; rows.len()];
        assert!(cav_train(
            "x",
            SpaceKind::Behavioral,
            &rows,
            &labels,
            &CavConfig::default()
        )
        .is_err());
    }

    #[test]
    fn extrapolation_moves_along_the_direction() {
        let (rows, labels) = toy();
        let cav = cav_train(
            "x",
            SpaceKind::Behavioral,
            &rows,
            &labels,
            &CavConfig::default(),
        )
        .unwrap();
        let w = vec![0.2, -0.4];
        assert_eq!(
            cav_extrapolate(&w, SpaceKind::Behavioral, &cav, 0.0).unwrap(),
            w
        );
        let mut last = f64::NEG_INFINITY;
        for k in 0..10 {
            let x = cav_extrapolate(&w, SpaceKind::Behavioral, &cav, k as f64 * 0.5).unwrap();
            let proj = dot(&x, &cav.dir);
            assert!(proj > last);
            last = proj;
        }
        assert!(cav_extrapolate(&w, SpaceKind::Semantic, &cav, 1.0).is_err());
    }
}
