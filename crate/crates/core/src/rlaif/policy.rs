use super::{state_index, Policy};
use crate::error::{ElmError, Result};
use crate::model::{ElmModel, MixedSequence};
use crate::nn::{adam_step, log_softmax, AdamHyper, AdamState, GradTable};

/// One free logit per (prefix, action), trained by plain gradient ascent.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSoftmax {
    pub actions: usize,
    pub horizon: usize,
    /// Logits per level, `state · actions + a`.
    pub logits: Vec<Vec<f64>>,
    grad: Vec<Vec<f64>>,
}

impl TabularSoftmax {
    pub fn uniform(actions: usize, horizon: usize) -> Self {
        let logits: Vec<Vec<f64>> = (0..horizon)
            .map(|n| vec![0.0; actions.pow(n as u32 + 1)])
            .collect();
        TabularSoftmax {
            actions,
            horizon,
            grad: logits.clone(),
            logits,
        }
    }

    /// Logits `ln p(a|s)` of another policy, so both agree exactly up to
    /// rounding.
    pub fn from_policy(policy: &dyn Policy, horizon: usize) -> Result<Self> {
        let actions = policy.actions();
        let mut out = Self::uniform(actions, horizon);
        for n in 0..horizon {
            for s in 0..actions.pow(n as u32) {
                let p = policy.probs(&super::trajectory(s, actions, n))?;
                for a in 0..actions {
                    out.logits[n][s * actions + a] = p[a].ln();
                }
            }
        }
        Ok(out)
    }

    /// Random logits with standard-normal entries.
    pub fn random(actions: usize, horizon: usize, rng: &mut crate::rng::SplitMix64) -> Self {
        let mut out = Self::uniform(actions, horizon);
        for level in &mut out.logits {
            level.iter_mut().for_each(|x| *x = rng.normal());
        }
        out
    }

    /// Gradient accumulated since the last update.
    pub fn pending(&self) -> &[Vec<f64>] {
        &self.grad
    }

    fn row(&self, prefix: &[usize]) -> std::ops::Range<usize> {
        let s = state_index(prefix, self.actions);
        s * self.actions..(s + 1) * self.actions
    }
}

impl Policy for TabularSoftmax {
    fn actions(&self) -> usize {
        self.actions
    }

    fn probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.len() >= self.horizon {
            return Err(ElmError::config("prefix reaches the horizon"));
        }
        let r = self.row(prefix);
        Ok(log_softmax(&self.logits[prefix.len()][r])
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    fn accumulate(&mut self, traj: &[usize], weight: f64) -> Result<()> {
        for n in 0..traj.len() {
            let p = self.probs(&traj[..n])?;
            let r = self.row(&traj[..n]);
            for (j, g) in self.grad[n][r].iter_mut().enumerate() {
                *g += weight * (f64::from(u8::from(j == traj[n])) - p[j]);
            }
        }
        Ok(())
    }

    fn ascend(&mut self, lr: f64) -> Result<()> {
        for (l, g) in self.logits.iter_mut().zip(&mut self.grad) {
            for (x, d) in l.iter_mut().zip(g.iter_mut()) {
                *x += lr * *d;
                *d = 0.0;
            }
        }
        Ok(())
    }
}

/// The model as a policy over a few of its tokens: the next-token logits
/// after `prompt` and the prefix, restricted to `tokens` and renormalized.
/// Updates use Adam on every trainable parameter.
#[derive(Debug, Clone)]
pub struct ElmPolicy {
    pub model: ElmModel<f64>,
    pub prompt: MixedSequence,
    pub tokens: Vec<usize>,
    grads: Option<GradTable<f64>>,
    opt: AdamState<f64>,
}

impl ElmPolicy {
    pub fn new(model: ElmModel<f64>, prompt: MixedSequence, tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(ElmError::config("a policy needs at least two actions"));
        }
        let vocab = model.config().vocab_size;
        if let Some(t) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(ElmError::config(format!(
                "action token {t} outside vocabulary"
            )));
        }
        if prompt.is_empty() {
            return Err(ElmError::config("policy prompt is empty"));
        }
        let opt = AdamState::new(model.params());
        Ok(ElmPolicy {
            model,
            prompt,
            tokens,
            grads: None,
            opt,
        })
    }

    fn sequence(&self, prefix: &[usize]) -> MixedSequence {
        let mut seq = self.prompt.clone();
        prefix.iter().for_each(|&a| seq.push_token(self.tokens[a]));
        seq
    }

    fn restricted(&self, row: &[f64]) -> Vec<f64> {
        let picked: Vec<f64> = self.tokens.iter().map(|&t| row[t]).collect();
        log_softmax(&picked).into_iter().map(f64::exp).collect()
    }
}

impl Policy for ElmPolicy {
    fn actions(&self) -> usize {
        self.tokens.len()
    }

    fn probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let logits = self.model.forward_logits(&self.sequence(prefix))?;
        Ok(self.restricted(logits.row(logits.rows() - 1)))
    }

    fn accumulate(&mut self, traj: &[usize], weight: f64) -> Result<()> {
        if traj.is_empty() {
            return Ok(());
        }
        let seq = self.sequence(&traj[..traj.len() - 1]);
        let (logits, cache) = self.model.forward(std::slice::from_ref(&seq))?;
        let v = logits.cols();
        let mut dlogits = vec![0.0; logits.len()];
        let first = self.prompt.len() - 1;
        for (n, &a) in traj.iter().enumerate() {
            let row = first + n;
            let p = self.restricted(logits.row(row));
            for (j, &t) in self.tokens.iter().enumerate() {
                // Descent direction for Adam: minus the ascent gradient.
                dlogits[row * v + t] -= weight * (f64::from(u8::from(j == a)) - p[j]);
            }
        }
        let g = self.model.backward(&cache, &dlogits)?;
        match &mut self.grads {
            Some(acc) => acc.accumulate(&g),
            None => self.grads = Some(g),
        }
        Ok(())
    }

    fn ascend(&mut self, lr: f64) -> Result<()> {
        if let Some(g) = self.grads.take() {
            adam_step(
                self.model.params_mut(),
                &g,
                &mut self.opt,
                &AdamHyper::with_lr(lr),
            )?;
        }
        Ok(())
    }
}
