use serde::{Deserialize, Serialize};

use super::table::dot;
use crate::error::{ElmError, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalsConfig {
    pub k: usize,
    pub lambda: f64,
    pub sweeps: usize,
    /// Minimum observed ratings per user and per item.
    pub min_ratings: usize,
    pub seed: u64,
}

impl Default for WalsConfig {
    fn default() -> Self {
        WalsConfig {
            k: 16,
            lambda: 0.05,
            sweeps: 15,
            min_ratings: 1,
            seed: 7,
        }
    }
}

/// Row-major user (`n_users × k`) and item (`n_items × k`) factors.
#[derive(Debug, Clone, PartialEq)]
pub struct MfFactors {
    pub k: usize,
    pub lambda: f64,
    pub sweeps: usize,
    pub users: Vec<f64>,
    pub items: Vec<f64>,
    /// Regularized objective at initialization and after every half-sweep.
    pub objective: Vec<f64>,
}

impl MfFactors {
    pub fn user(&self, u: usize) -> &[f64] {
        &self.users[u * self.k..(u + 1) * self.k]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.items[i * self.k..(i + 1) * self.k]
    }

    pub fn n_users(&self) -> usize {
        self.users.len() / self.k
    }

    pub fn n_items(&self) -> usize {
        self.items.len() / self.k
    }

    /// Sum of squared errors over `ratings` plus the L2 penalty.
    pub fn objective(&self, ratings: &[(usize, usize, f64)]) -> f64 {
        let sse: f64 = ratings
            .iter()
            .map(|&(u, i, r)| {
                let e = r - predict_rating(self.user(u), self.item(i));
                e * e
            })
            .sum();
        sse + self.lambda * (dot(&self.users, &self.users) + dot(&self.items, &self.items))
    }

    pub fn rmse(&self, ratings: &[(usize, usize, f64)]) -> f64 {
        let sse: f64 = ratings
            .iter()
            .map(|&(u, i, r)| (r - predict_rating(self.user(u), self.item(i))).powi(2))
            .sum();
        (sse / ratings.len().max(1) as f64).sqrt()
    }
}

/// Predicted rating: the unclamped dot product.
pub fn predict_rating(user: &[f64], item: &[f64]) -> f64 {
    dot(user, item)
}

/// Solves the SPD system `a x = b` (`a` is `k × k`) by Cholesky.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], k: usize) -> Result<()> {
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(ElmError::numeric(
                "wals",
                "singular normal equations (raise lambda above zero)",
            ));
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in (j + 1)..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / d;
        }
    }
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s -= a[i * k + p] * b[p];
        }
        b[i] = s / a[i * k + i];
    }
    for i in (0..k).rev() {
        let mut s = b[i];
        for p in (i + 1)..k {
            s -= a[p * k + i] * b[p];
        }
        b[i] = s / a[i * k + i];
    }
    Ok(())
}

/// Exact ridge solve of every row of `target` against the fixed `other`
/// factors: `(Σ o oᵀ + λI) x = Σ r o` over each row's observations.
fn half_sweep(
    obs: &[Vec<(usize, f64)>],
    other: &[f64],
    k: usize,
    lambda: f64,
    target: &mut [f64],
) -> Result<()> {
    let mut a = vec![0.0; k * k];
    let mut b = vec![0.0; k];
    for (row, entries) in obs.iter().enumerate() {
        a.iter_mut().for_each(|x| *x = 0.0);
        b.iter_mut().for_each(|x| *x = 0.0);
        for &(j, r) in entries {
            let o = &other[j * k..(j + 1) * k];
            for p in 0..k {
                b[p] += r * o[p];
                for q in 0..=p {
                    a[p * k + q] += o[p] * o[q];
                }
            }
        }
        for p in 0..k {
            a[p * k + p] += lambda;
            for q in 0..p {
                a[q * k + p] = a[p * k + q];
            }
        }
        cholesky_solve(&mut a, &mut b, k)?;
        target[row * k..(row + 1) * k].copy_from_slice(&b);
    }
    Ok(())
}

/// Alternating least squares with unit weight on observed entries and zero
/// weight elsewhere. Item factors start as `N(0, 0.1²)`; each sweep solves
/// users, then items.
pub fn wals_fit(
    n_users: usize,
    n_items: usize,
    ratings: &[(usize, usize, f64)],
    cfg: &WalsConfig,
) -> Result<MfFactors> {
    if cfg.k == 0 {
        return Err(ElmError::config("factor rank must be at least 1"));
    }
    if cfg.lambda < 0.0 {
        return Err(ElmError::config("lambda must be nonnegative"));
    }
    let k = cfg.k;
    let mut by_user = vec![Vec::new(); n_users];
    let mut by_item = vec![Vec::new(); n_items];
    for &(u, i, r) in ratings {
        if u >= n_users || i >= n_items {
            return Err(ElmError::data(format!("rating ({u}, {i}) outside matrix")));
        }
        by_user[u].push((i, r));
        by_item[i].push((u, r));
    }
    let need = cfg.min_ratings.max(1);
    if let Some(u) = by_user.iter().position(|v| v.len() < need) {
        return Err(ElmError::data(format!(
            "user {u} has fewer than {need} ratings"
        )));
    }
    if let Some(i) = by_item.iter().position(|v| v.len() < need) {
        return Err(ElmError::data(format!(
            "item {i} has fewer than {need} ratings"
        )));
    }
    let mut rng = SplitMix64::stream(cfg.seed, "wals/init");
    let mut f = MfFactors {
        k,
        lambda: cfg.lambda,
        sweeps: cfg.sweeps,
        users: vec![0.0; n_users * k],
        items: (0..n_items * k).map(|_| 0.1 * rng.normal()).collect(),
        objective: Vec::new(),
    };
    f.objective.push(f.objective(ratings));
    for _ in 0..cfg.sweeps {
        half_sweep(&by_user, &f.items, k, cfg.lambda, &mut f.users)?;
        f.objective.push(f.objective(ratings));
        half_sweep(&by_item, &f.users, k, cfg.lambda, &mut f.items)?;
        f.objective.push(f.objective(ratings));
    }
    Ok(f)
}
