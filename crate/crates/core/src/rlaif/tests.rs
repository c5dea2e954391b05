use super::*;
use crate::embed::SemanticEncoderConfig;
use crate::metrics::bc_user;

fn random_problem(actions: usize, horizon: usize, beta: f64, seed: u64) -> Comdp {
    let mut rng = SplitMix64::stream(seed, "test/problem");
    let reference = TabularSoftmax::random(actions, horizon, &mut rng);
    let mut rr = SplitMix64::stream(seed, "test/rewards");
    Comdp::new(actions, horizon, beta, &reference, |t| {
        let r = rr.uniform_range(-1.0, 1.0);
        // Action 0 plays the role of EOS.
        if t.last() == Some(&0) {
            r
        } else {
            0.0
        }
    })
    .unwrap()
}

/// Brute-force log-partition `α log Σ_traj p(traj) exp(R/α)`.
fn enumerated_log_partition(c: &Comdp, alpha: f64) -> f64 {
    let mut total = 0.0f64;
    let terms: Vec<f64> = (0..c.n_trajectories())
        .map(|i| {
            let t = c.trajectory(i);
            let mut lp = 0.0;
            for n in 0..t.len() {
                lp += c.reference_probs(&t[..n])[t[n]].ln();
            }
            lp + c.reward(&t) / alpha
        })
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for x in &terms {
        total += (x - m).exp();
    }
    alpha * (m + total.ln())
}

#[test]
fn value_matches_enumeration() {
    for seed in 0..5 {
        for (a, n) in [(3, 3), (2, 4), (5, 2), (4, 1)] {
            let c = random_problem(a, n, 0.3, seed);
            let mu = exact_soft_policy(&c, 0.3).unwrap();
            let want = enumerated_log_partition(&c, 0.3);
            assert!(
                (mu.value0() - want).abs() < 1e-10,
                "{a} {n}: {} vs {want}",
                mu.value0()
            );
        }
    }
}

#[test]
fn soft_policy_rows_are_distributions() {
    let c = random_problem(4, 3, 0.5, 1);
    let mu = exact_soft_policy(&c, 0.5).unwrap();
    for level in &mu.probs {
        for row in level.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn one_step_closed_form() {
    let c = random_problem(5, 1, 0.7, 3);
    let mu = exact_soft_policy(&c, 0.7).unwrap();
    let p = c.reference_probs(&[]);
    let w: Vec<f64> = (0..5)
        .map(|a| p[a] * (c.reward(&[a]) / 0.7).exp())
        .collect();
    let z: f64 = w.iter().sum();
    for a in 0..5 {
        assert!((mu.probs_at(&[])[a] - w[a] / z).abs() < 1e-12);
    }
}

#[test]
fn hot_limit_returns_reference() {
    let c = random_problem(3, 3, 1.0, 4);
    let mu = exact_soft_policy(&c, 1e6).unwrap();
    let reference = TabularSoftmax::from_policy(&mu, 3).unwrap();
    let _ = reference;
    let refp = ReferenceView(&c);
    for kl in per_step_kl(&c, &mu, &refp).unwrap() {
        assert!(kl < 1e-6, "{kl}");
    }
}

/// The tabulated reference as a policy.
struct ReferenceView<'a>(&'a Comdp);

impl Policy for ReferenceView<'_> {
    fn actions(&self) -> usize {
        self.0.actions
    }
    fn probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.0.reference_probs(prefix).to_vec())
    }
    fn accumulate(&mut self, _: &[usize], _: f64) -> Result<()> {
        unreachable!()
    }
    fn ascend(&mut self, _: f64) -> Result<()> {
        unreachable!()
    }
}

#[test]
fn soft_policy_maximizes_objective() {
    let c = random_problem(3, 3, 0.4, 5);
    let mu = exact_soft_policy(&c, c.beta).unwrap();
    let best = objective(&c, &mu).unwrap();
    assert!((best - mu.value0()).abs() < 1e-10);
    let mut rng = SplitMix64::stream(5, "test/random-policies");
    for _ in 0..100 {
        let pi = TabularSoftmax::random(3, 3, &mut rng);
        assert!(objective(&c, &pi).unwrap() <= best + 1e-12);
    }
    assert!(objective(&c, &ReferenceView(&c)).unwrap() <= best);
}

#[test]
fn oversized_problems_are_rejected() {
    let pi = TabularSoftmax::uniform(6, 2);
    assert!(matches!(
        Comdp::new(6, 2, 1.0, &pi, |_| 0.0),
        Err(ElmError::Config(_))
    ));
    let pi = TabularSoftmax::uniform(3, 5);
    assert!(matches!(
        Comdp::new(3, 5, 1.0, &pi, |_| 0.0),
        Err(ElmError::Config(_))
    ));
    let pi = TabularSoftmax::uniform(3, 2);
    assert!(Comdp::new(3, 2, 0.0, &pi, |_| 0.0).is_err());
}

#[test]
fn reinforce_gradient_is_unbiased() {
    let c = random_problem(3, 1, 0.5, 6);
    let mut rng = SplitMix64::stream(6, "test/pi");
    let pi = TabularSoftmax::random(3, 1, &mut rng);
    // Exact gradient by central differences of the enumerated objective.
    let h = 1e-6;
    let exact: Vec<f64> = (0..3)
        .map(|j| {
            let (mut up, mut dn) = (pi.clone(), pi.clone());
            up.logits[0][j] += h;
            dn.logits[0][j] -= h;
            (objective(&c, &up).unwrap() - objective(&c, &dn).unwrap()) / (2.0 * h)
        })
        .collect();
    let n = 100_000;
    let (mut sum, mut sq) = ([0.0; 3], [0.0; 3]);
    let mut srng = SplitMix64::stream(6, "test/samples");
    let p = pi.probs(&[]).unwrap();
    for _ in 0..n {
        let t = sample_trajectory(&pi, 1, &mut srng).unwrap();
        let adj = c.reward(&t) - c.beta * (p[t[0]].ln() - c.reference_probs(&[])[t[0]].ln());
        let mut one = pi.clone();
        one.accumulate(&t, adj).unwrap();
        for j in 0..3 {
            let g = one.pending()[0][j];
            sum[j] += g;
            sq[j] += g * g;
        }
    }
    for j in 0..3 {
        let mean = sum[j] / n as f64;
        let var = sq[j] / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - exact[j]).abs() <= 3.0 * se,
            "{j}: {mean} vs {} (se {se})",
            exact[j]
        );
    }
}

#[test]
fn tabular_reinforce_reaches_soft_optimum() {
    let c = random_problem(3, 3, 0.5, 8);
    let mu = exact_soft_policy(&c, c.beta).unwrap();
    let mut pi = TabularSoftmax::from_policy(&ReferenceView(&c), 3).unwrap();
    let before = objective(&c, &pi).unwrap();
    let cfg = ReinforceConfig {
        steps: 3000,
        batch: 32,
        lr: 0.5,
        ..ReinforceConfig::default()
    };
    let log = reinforce_kl_finetune(&mut pi, &c, &cfg).unwrap();
    assert_eq!(log.len(), 3000);
    let kl = per_step_kl(&c, &pi, &mu).unwrap();
    assert!(kl.iter().all(|&k| k <= 0.05), "{kl:?}");
    assert!(objective(&c, &pi).unwrap() >= before);
}

#[test]
fn heavy_penalty_stays_near_reference() {
    let c = random_problem(3, 2, 50.0, 9);
    let mut pi = TabularSoftmax::from_policy(&ReferenceView(&c), 2).unwrap();
    let cfg = ReinforceConfig {
        steps: 500,
        batch: 16,
        lr: 0.01,
        ..ReinforceConfig::default()
    };
    reinforce_kl_finetune(&mut pi, &c, &cfg).unwrap();
    for kl in per_step_kl(&c, &pi, &ReferenceView(&c)).unwrap() {
        assert!(kl < 0.01, "{kl}");
    }
}

#[test]
fn reward_is_gated_on_eos() {
    let vocab = Vocab::build(["the quiet small film"], 64).unwrap();
    let enc = SemanticEncoder::new(SemanticEncoderConfig::default()).unwrap();
    let source = enc.encode("the quiet small film").unwrap();
    let mode = RewardMode::Semantic { source };
    let mut ids = vocab.encode("the quiet small film");
    assert_eq!(consistency_reward(&ids, &vocab, &enc, &mode), 0.0);
    ids.push(EOS);
    assert!((consistency_reward(&ids, &vocab, &enc, &mode) - 1.0).abs() < 1e-12);
    assert_eq!(consistency_reward(&[EOS], &vocab, &enc, &mode), 0.0);
}

#[test]
fn behavioral_reward_matches_metric() {
    let vocab = Vocab::build(["likes quiet films dislikes loud ones"], 64).unwrap();
    let enc = SemanticEncoder::new(SemanticEncoderConfig::default()).unwrap();
    let texts = [
        "quiet films",
        "loud ones",
        "likes quiet",
        "dislikes loud",
        "films ones",
    ];
    let vectors: Vec<Vec<f64>> = texts.iter().map(|t| enc.encode(t).unwrap()).collect();
    let set = CandidateSet {
        ids: (0..5).map(|i| format!("item_{i:04}")).collect(),
        relevance: vec![5.0, 1.0, 4.0, 0.0, 3.0],
    };
    let profile = "likes quiet films dislikes loud ones";
    let mut ids = vocab.encode(profile);
    ids.push(EOS);
    let mode = RewardMode::Behavioral {
        set: set.clone(),
        vectors: vectors.clone(),
    };
    let want = bc_user(&enc, profile, &set, &vectors).unwrap().spearman;
    assert_eq!(consistency_reward(&ids, &vocab, &enc, &mode), want);
}
