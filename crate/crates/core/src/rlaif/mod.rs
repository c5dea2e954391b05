//! KL-regularized fine-tuning against a consistency reward: the reward
//! itself, an exact soft-optimal policy for enumerable problems, exact
//! objectives, and REINFORCE with a KL penalty.
//!
//! Problems here are fixed-horizon: every trajectory has exactly `horizon`
//! actions, the state is the prefix, and the reward is paid on the full
//! trajectory. The KL weight of the objective doubles as the temperature of
//! the soft-optimal policy.

mod policy;

pub use policy::{ElmPolicy, TabularSoftmax};

use serde::{Deserialize, Serialize};

use crate::embed::SemanticEncoder;
use crate::error::{ElmError, Result};
use crate::metrics::{behavioral_consistency, CandidateSet};
use crate::model::{Vocab, EOS};
use crate::rng::SplitMix64;

pub const MAX_ACTIONS: usize = 5;
pub const MAX_HORIZON: usize = 4;

/// What the reward measures.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardMode {
    /// Cosine of the re-embedded text with the source vector.
    Semantic { source: Vec<f64> },
    /// Ranking agreement over a candidate set, candidates represented by
    /// `vectors`.
    Behavioral {
        set: CandidateSet,
        vectors: Vec<Vec<f64>>,
    },
}

/// Consistency of `tokens` if they end with EOS, else 0. Texts that cannot
/// be scored (nothing but specials) also get 0.
pub fn consistency_reward(
    tokens: &[usize],
    vocab: &Vocab,
    encoder: &SemanticEncoder,
    mode: &RewardMode,
) -> f64 {
    if tokens.last() != Some(&EOS) {
        return 0.0;
    }
    let text = vocab.decode(&tokens[..tokens.len() - 1]);
    let scored = match mode {
        RewardMode::Semantic { source } => encoder
            .encode(&text)
            .map(|e| crate::embed::cosine(&e, source)),
        RewardMode::Behavioral { set, vectors } => {
            behavioral_consistency(encoder, &text, set, vectors).map(|s| s.spearman)
        }
    };
    scored.unwrap_or(0.0)
}

/// A stochastic policy over `actions()` actions given a prefix of actions.
pub trait Policy {
    fn actions(&self) -> usize;

    fn probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;

    /// Adds `weight · ∇ Σ_n log π(a_n | a_<n)` to the pending gradient.
    fn accumulate(&mut self, traj: &[usize], weight: f64) -> Result<()>;

    /// Moves the parameters up the pending gradient and clears it.
    fn ascend(&mut self, lr: f64) -> Result<()>;
}

/// Enumerable fixed-horizon problem with tabulated reference policy and
/// trajectory rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Comdp {
    pub actions: usize,
    pub horizon: usize,
    /// KL weight; also the soft-policy temperature.
    pub beta: f64,
    /// Reference probabilities per level, `state · actions + a`.
    reference: Vec<Vec<f64>>,
    /// Reward of each full trajectory by index.
    rewards: Vec<f64>,
}

fn state_index(prefix: &[usize], actions: usize) -> usize {
    prefix.iter().fold(0, |acc, &a| acc * actions + a)
}

fn trajectory(mut index: usize, actions: usize, len: usize) -> Vec<usize> {
    let mut t = vec![0; len];
    for slot in t.iter_mut().rev() {
        *slot = index % actions;
        index /= actions;
    }
    t
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Comdp {
    /// Tabulates `reference` and `reward` over every prefix and trajectory.
    pub fn new(
        actions: usize,
        horizon: usize,
        beta: f64,
        reference: &dyn Policy,
        mut reward: impl FnMut(&[usize]) -> f64,
    ) -> Result<Self> {
        if !(2..=MAX_ACTIONS).contains(&actions) || !(1..=MAX_HORIZON).contains(&horizon) {
            return Err(ElmError::config(format!(
                "enumerable problems need 2..={MAX_ACTIONS} actions and 1..={MAX_HORIZON} steps, got {actions} and {horizon}"
            )));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(ElmError::config("KL weight must be positive"));
        }
        if reference.actions() != actions {
            return Err(ElmError::config("reference policy action count differs"));
        }
        let mut levels = Vec::with_capacity(horizon);
        for n in 0..horizon {
            let states = actions.pow(n as u32);
            let mut probs = Vec::with_capacity(states * actions);
            for s in 0..states {
                let p = reference.probs(&trajectory(s, actions, n))?;
                check_distribution(&p, actions)?;
                probs.extend(p);
            }
            levels.push(probs);
        }
        let rewards = (0..actions.pow(horizon as u32))
            .map(|i| reward(&trajectory(i, actions, horizon)))
            .collect::<Vec<_>>();
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(ElmError::numeric("reward", "non-finite trajectory reward"));
        }
        Ok(Comdp {
            actions,
            horizon,
            beta,
            reference: levels,
            rewards,
        })
    }

    pub fn reference_probs(&self, prefix: &[usize]) -> &[f64] {
        let s = state_index(prefix, self.actions);
        &self.reference[prefix.len()][s * self.actions..(s + 1) * self.actions]
    }

    pub fn reward(&self, traj: &[usize]) -> f64 {
        self.rewards[state_index(traj, self.actions)]
    }

    pub fn n_trajectories(&self) -> usize {
        self.rewards.len()
    }

    pub fn trajectory(&self, index: usize) -> Vec<usize> {
        trajectory(index, self.actions, self.horizon)
    }

    /// Reference log-probability of a full trajectory.
    pub fn reference_log_prob(&self, traj: &[usize]) -> f64 {
        (0..traj.len())
            .map(|n| self.reference_probs(&traj[..n])[traj[n]].ln())
            .sum()
    }
}

fn check_distribution(p: &[f64], actions: usize) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.len() != actions
        || p.iter().any(|x| !(x.is_finite() && *x >= 0.0))
        || (total - 1.0).abs() > 1e-9
    {
        return Err(ElmError::numeric(
            "policy",
            "probabilities do not form a distribution",
        ));
    }
    Ok(())
}

/// Soft-optimal policy with its values, tabulated per level like
/// [`Comdp`]'s reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPolicy {
    pub actions: usize,
    pub alpha: f64,
    pub probs: Vec<Vec<f64>>,
    /// `V*_n(s)` per level and state.
    pub values: Vec<Vec<f64>>,
    /// `Q*_n(s, a)` per level, `state · actions + a`.
    pub q: Vec<Vec<f64>>,
}

impl SoftPolicy {
    /// `V*_0` at the empty prefix.
    pub fn value0(&self) -> f64 {
        self.values[0][0]
    }

    pub fn probs_at(&self, prefix: &[usize]) -> &[f64] {
        let s = state_index(prefix, self.actions);
        &self.probs[prefix.len()][s * self.actions..(s + 1) * self.actions]
    }
}

impl Policy for SoftPolicy {
    fn actions(&self) -> usize {
        self.actions
    }
    fn probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.probs_at(prefix).to_vec())
    }
    fn accumulate(&mut self, _: &[usize], _: f64) -> Result<()> {
        Err(ElmError::config("the soft-optimal policy is not trainable"))
    }
    fn ascend(&mut self, _: f64) -> Result<()> {
        Err(ElmError::config("the soft-optimal policy is not trainable"))
    }
}

/// Backward recursion: `Q_{N−1}(s, a) = R(s·a)`, `Q_n(s, a) = V_{n+1}(s·a)`,
/// `V_n(s) = α log Σ_a p(a|s) exp(Q_n(s, a)/α)`, and
/// `μ_n(a|s) = p(a|s) exp((Q_n(s, a) − V_n(s))/α)`.
pub fn exact_soft_policy(comdp: &Comdp, alpha: f64) -> Result<SoftPolicy> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(ElmError::config("temperature must be positive"));
    }
    let a_n = comdp.actions;
    let n_levels = comdp.horizon;
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); n_levels + 1];
    let mut q: Vec<Vec<f64>> = vec![Vec::new(); n_levels];
    let mut probs: Vec<Vec<f64>> = vec![Vec::new(); n_levels];
    values[n_levels] = comdp.rewards.clone();
    for n in (0..n_levels).rev() {
        let states = a_n.pow(n as u32);
        let mut qn = Vec::with_capacity(states * a_n);
        let mut vn = Vec::with_capacity(states);
        let mut pn = Vec::with_capacity(states * a_n);
        for s in 0..states {
            let qs: Vec<f64> = (0..a_n).map(|a| values[n + 1][s * a_n + a]).collect();
            let p = &comdp.reference[n][s * a_n..(s + 1) * a_n];
            let terms = p.iter().zip(&qs).map(|(&p, &q)| p.ln() + q / alpha);
            let v = alpha * log_sum_exp(terms);
            pn.extend(
                p.iter()
                    .zip(&qs)
                    .map(|(&p, &q)| p * ((q - v) / alpha).exp()),
            );
            vn.push(v);
            qn.extend(qs);
        }
        values[n] = vn;
        q[n] = qn;
        probs[n] = pn;
    }
    values.truncate(n_levels);
    Ok(SoftPolicy {
        actions: a_n,
        alpha,
        probs,
        values,
        q,
    })
}

/// Trajectory probabilities of `policy`, by trajectory index.
pub fn trajectory_probs(comdp: &Comdp, policy: &dyn Policy) -> Result<Vec<f64>> {
    let mut level = vec![1.0];
    for n in 0..comdp.horizon {
        let mut next = Vec::with_capacity(level.len() * comdp.actions);
        for (s, &ps) in level.iter().enumerate() {
            let p = policy.probs(&trajectory(s, comdp.actions, n))?;
            check_distribution(&p, comdp.actions)?;
            next.extend(p.iter().map(|x| ps * x));
        }
        level = next;
    }
    Ok(level)
}

/// `E_π[R] − β·KL(π ‖ p_ref)` by enumeration.
pub fn objective(comdp: &Comdp, policy: &dyn Policy) -> Result<f64> {
    let probs = trajectory_probs(comdp, policy)?;
    let mut j = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let t = comdp.trajectory(i);
        j += p * (comdp.rewards[i] - comdp.beta * (p.ln() - comdp.reference_log_prob(&t)));
    }
    Ok(j)
}

/// Per-step divergence of `policy` from `target`: for each step `n`,
/// `E_{s_n ∼ π}[KL(π(·|s_n) ‖ target(·|s_n))]`.
pub fn per_step_kl(comdp: &Comdp, policy: &dyn Policy, target: &dyn Policy) -> Result<Vec<f64>> {
    let mut reach = vec![1.0];
    let mut out = Vec::with_capacity(comdp.horizon);
    for n in 0..comdp.horizon {
        let mut kl = 0.0;
        let mut next = Vec::with_capacity(reach.len() * comdp.actions);
        for (s, &ps) in reach.iter().enumerate() {
            let prefix = trajectory(s, comdp.actions, n);
            let p = policy.probs(&prefix)?;
            let q = target.probs(&prefix)?;
            kl += ps
                * p.iter()
                    .zip(&q)
                    .filter(|(&a, _)| a > 0.0)
                    .map(|(&a, &b)| a * (a / b).ln())
                    .sum::<f64>();
            next.extend(p.iter().map(|x| ps * x));
        }
        out.push(kl);
        reach = next;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReinforceConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Subtract the batch-mean adjusted reward.
    pub baseline: bool,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        ReinforceConfig {
            steps: 5000,
            batch: 16,
            lr: 0.05,
            seed: 7,
            baseline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinforceLine {
    pub step: u64,
    /// Batch mean of `R − β·log(π/p_ref)`.
    #[serde(rename = "J_est")]
    pub j_est: f64,
    /// Batch mean of the sequence log-ratio.
    pub kl_to_ref: f64,
}

/// Draws one trajectory from `policy`.
pub fn sample_trajectory(
    policy: &dyn Policy,
    horizon: usize,
    rng: &mut SplitMix64,
) -> Result<Vec<usize>> {
    let mut t = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let p = policy.probs(&t)?;
        t.push(rng.categorical(&p));
    }
    Ok(t)
}

/// `log π(traj) − log p_ref(traj)`; non-finite values abort.
fn log_ratio(comdp: &Comdp, policy: &dyn Policy, traj: &[usize]) -> Result<f64> {
    let mut lp = 0.0;
    for n in 0..traj.len() {
        lp += policy.probs(&traj[..n])?[traj[n]].ln();
    }
    let r = lp - comdp.reference_log_prob(traj);
    if !r.is_finite() {
        return Err(ElmError::numeric(
            "reinforce",
            format!("non-finite log-ratio for {traj:?}"),
        ));
    }
    Ok(r)
}

/// Sampled policy gradient of `E[R − β·log(π/p_ref)]`: each trajectory
/// contributes `(R − β·log-ratio) · ∇ log π(traj)`, averaged over the
/// batch. The policy is updated in place; one log line per step.
pub fn reinforce_kl_finetune(
    policy: &mut dyn Policy,
    comdp: &Comdp,
    cfg: &ReinforceConfig,
) -> Result<Vec<ReinforceLine>> {
    if cfg.steps == 0 || cfg.batch == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(ElmError::config(
            "reinforce needs steps, batch and a positive learning rate",
        ));
    }
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = SplitMix64::stream(cfg.seed, &format!("reinforce/{step}"));
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let t = sample_trajectory(policy, comdp.horizon, &mut rng)?;
            let ratio = log_ratio(comdp, policy, &t)?;
            batch.push((comdp.reward(&t) - comdp.beta * ratio, ratio, t));
        }
        let n = cfg.batch as f64;
        let j_est = batch.iter().map(|b| b.0).sum::<f64>() / n;
        let kl_to_ref = batch.iter().map(|b| b.1).sum::<f64>() / n;
        let base = if cfg.baseline { j_est } else { 0.0 };
        for (adj, _, t) in &batch {
            policy.accumulate(t, (adj - base) / n)?;
        }
        policy.ascend(cfg.lr)?;
        log.push(ReinforceLine {
            step: step + 1,
            j_est,
            kl_to_ref,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests;
