//! Interpolation and CAV extrapolation sweeps over a trained model.

use serde::{Deserialize, Serialize};

use super::Artifacts;
use crate::embed::{cosine, predict_rating, SpaceKind};
use crate::error::{ElmError, Result};
use crate::geometry::{cav_extrapolate, cav_train, conform, interpolate, Cav, CavConfig};
use crate::metrics::{behavioral_consistency, CandidateSet};
use crate::model::{build_prompt, decode_text, DecodeMode, EmbeddingTables};
use crate::rng::SplitMix64;
use crate::world::{default_task_specs, split_entities, TaskSpec, World};

/// Attribute threshold for CAV labels.
pub const CAV_THRESHOLD: f64 = 2.0 / 3.0;

fn spec(id: &str) -> Result<TaskSpec> {
    default_task_specs()
        .into_iter()
        .find(|s| s.id == id)
        .ok_or_else(|| ElmError::data(format!("unknown task {id}")))
}

impl Artifacts {
    /// Decodes `task` with its slots filled by `vectors`, in slot order.
    pub fn decode_vectors(
        &self,
        task: &str,
        vectors: &[Vec<f64>],
        mode: DecodeMode,
    ) -> Result<String> {
        let spec = spec(task)?;
        if vectors.len() != spec.kind.slots() {
            return Err(ElmError::config(format!(
                "task {task} takes {} vectors, got {}",
                spec.kind.slots(),
                vectors.len()
            )));
        }
        let slots: Vec<String> = (0..vectors.len()).map(|i| format!("slot{i}")).collect();
        let refs: Vec<&str> = slots.iter().map(String::as_str).collect();
        let input = spec.render_input(&refs)?;
        let mut next = vectors.iter();
        let ck = &self.checkpoint;
        let prompt = build_prompt(&ck.vocab, &input, |_| {
            Ok(next.next().expect("one vector per slot").clone())
        })?;
        decode_text(
            &ck.model,
            &ck.vocab,
            &prompt,
            self.config.eval.max_len,
            mode,
        )
    }

    /// Held-out item indices, as split by the task builder.
    pub fn test_items(&self) -> Vec<usize> {
        split_entities(
            self.world.items.len(),
            self.config.tasks.split,
            self.world.seed,
            "tasks/split/items",
        )
        .1
    }

    pub fn test_users(&self) -> Vec<usize> {
        split_entities(
            self.world.users.len(),
            self.config.tasks.split,
            self.world.seed,
            "tasks/split/users",
        )
        .1
    }
}

/// CAVs for every attribute over item vectors, in both spaces. Labels are
/// `attr ≥ 2/3`; attributes with a single class are skipped.
pub fn train_cavs(world: &World, tables: &EmbeddingTables, lambda: f64) -> Result<Vec<Cav>> {
    let cfg = CavConfig {
        lambda,
        ..CavConfig::default()
    };
    let mut out = Vec::new();
    for space in [SpaceKind::Semantic, SpaceKind::Behavioral] {
        let table = tables
            .get(space)
            .ok_or_else(|| ElmError::data(format!("no {space} table loaded")))?;
        let rows: Vec<Vec<f64>> = world
            .items
            .iter()
            .map(|it| table.require(&it.id).map(<[f64]>::to_vec))
            .collect::<Result<_>>()?;
        for (k, name) in world.attr_names.iter().enumerate() {
            let labels: Vec<bool> = world
                .items
                .iter()
                .map(|it| it.attrs[k] >= CAV_THRESHOLD)
                .collect();
            match cav_train(name, space, &rows, &labels, &cfg) {
                Ok(c) => out.push(c),
                Err(ElmError::Degenerate(msg)) => log::warn!("skipping CAV: {msg}"),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpLine {
    pub a: String,
    pub b: String,
    pub alpha: f64,
    pub text: String,
    /// Cosine of the re-embedded text with each endpoint and with the mixed
    /// vector; null for empty output.
    pub sc_a: Option<f64>,
    pub sc_b: Option<f64>,
    pub sc_mix: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpSummary {
    pub pairs: usize,
    /// Pairs whose α = 0 decode equals the decode of endpoint a by id.
    pub endpoint_identical: usize,
    pub alphas: Vec<f64>,
    pub mean_sc_a: Vec<f64>,
    pub mean_sc_b: Vec<f64>,
    pub mean_sc_mix: Vec<f64>,
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = xs.map(|x| x.unwrap_or(0.0)).collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Summaries along `(1 − α)·a + α·b` for random pairs of held-out items,
/// α = 0, 0.1, …, 1.
pub fn interpolation_sweep(art: &Artifacts) -> Result<(Vec<InterpLine>, InterpSummary)> {
    let items = art.test_items();
    if items.len() < 2 {
        return Err(ElmError::data(
            "interpolation sweep needs two held-out items",
        ));
    }
    let alphas: Vec<f64> = (0..=10).map(|i| f64::from(i) / 10.0).collect();
    let mut rng = SplitMix64::stream(art.config.eval.seed, "reports/interpolation");
    let sem = art.semantic();
    let mut lines = Vec::new();
    let mut endpoint_identical = 0;
    let pairs = art.config.reports.interp_pairs;
    for _ in 0..pairs {
        let a = items[rng.below(items.len())];
        let mut b = items[rng.below(items.len() - 1)];
        if b == a {
            b = *items.last().expect("two items");
        }
        let (ida, idb) = (&art.world.items[a].id, &art.world.items[b].id);
        let (va, vb) = (sem.require(ida)?, sem.require(idb)?);
        let by_id =
            art.decode_input(&spec("summary")?.render_input(&[ida])?, DecodeMode::Greedy)?;
        for &alpha in &alphas {
            let mix = conform(SpaceKind::Semantic, interpolate(va, vb, alpha)?)?;
            let text =
                art.decode_vectors("summary", std::slice::from_ref(&mix), DecodeMode::Greedy)?;
            if alpha == 0.0 && text == by_id {
                endpoint_identical += 1;
            }
            let e = art.encoder.encode(&text).ok();
            let sc = |v: &[f64]| e.as_ref().map(|e| cosine(e, v));
            lines.push(InterpLine {
                a: ida.clone(),
                b: idb.clone(),
                alpha,
                sc_a: sc(va),
                sc_b: sc(vb),
                sc_mix: sc(&mix),
                text,
            });
        }
    }
    let at = |i: usize| lines.iter().skip(i).step_by(alphas.len());
    let summary = InterpSummary {
        pairs,
        endpoint_identical,
        mean_sc_a: (0..alphas.len())
            .map(|i| mean_opt(at(i).map(|l| l.sc_a)))
            .collect(),
        mean_sc_b: (0..alphas.len())
            .map(|i| mean_opt(at(i).map(|l| l.sc_b)))
            .collect(),
        mean_sc_mix: (0..alphas.len())
            .map(|i| mean_opt(at(i).map(|l| l.sc_mix)))
            .collect(),
        alphas,
    };
    Ok((lines, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavSweepLine {
    pub user: String,
    pub attr: String,
    pub alpha: f64,
    pub text: String,
    pub bc_spearman: Option<f64>,
    pub bc_ndcg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavSweepSummary {
    pub users: usize,
    pub attrs: Vec<String>,
    pub alphas: Vec<f64>,
    pub mean_bc_spearman: Vec<f64>,
    pub mean_bc_ndcg: Vec<f64>,
}

/// Predicted ratings of a (possibly shifted) user vector over `items`,
/// floored at zero, as relevances.
pub fn predicted_relevance(art: &Artifacts, user: &[f64], ids: &[String]) -> Result<CandidateSet> {
    let beh = art.behavioral();
    let relevance = ids
        .iter()
        .map(|id| Ok(predict_rating(user, beh.require(id)?).max(0.0)))
        .collect::<Result<_>>()?;
    Ok(CandidateSet {
        ids: ids.to_vec(),
        relevance,
    })
}

/// User profiles decoded from behavioral user vectors shifted along each
/// behavioral CAV. BC compares the profile's ranking of the user's
/// candidate items with the ratings predicted for the shifted vector.
pub fn cav_sweep(art: &Artifacts, cavs: &[Cav]) -> Result<(Vec<CavSweepLine>, CavSweepSummary)> {
    let cavs: Vec<&Cav> = cavs
        .iter()
        .filter(|c| c.space == SpaceKind::Behavioral)
        .collect();
    let alphas = art.config.reports.cav_alphas.clone();
    let users: Vec<usize> = art
        .test_users()
        .into_iter()
        .take(art.config.reports.cav_users)
        .collect();
    let beh = art.behavioral();
    let mut lines = Vec::new();
    for &u in &users {
        let uid = &art.world.users[u].id;
        let w = beh.require(uid)?;
        let (set, item_vecs) = art.user_candidate_set(u)?;
        for cav in &cavs {
            for &alpha in &alphas {
                let shifted = cav_extrapolate(w, SpaceKind::Behavioral, cav, alpha)?;
                let text = art.decode_vectors(
                    "user_profile",
                    std::slice::from_ref(&shifted),
                    DecodeMode::Greedy,
                )?;
                let truth = predicted_relevance(art, &shifted, &set.ids)?;
                let bc = if text.trim().is_empty() {
                    None
                } else {
                    Some(behavioral_consistency(
                        &art.encoder,
                        &text,
                        &truth,
                        &item_vecs,
                    )?)
                };
                lines.push(CavSweepLine {
                    user: uid.clone(),
                    attr: cav.attr.clone(),
                    alpha,
                    text,
                    bc_spearman: bc.map(|b| b.spearman),
                    bc_ndcg: bc.map(|b| b.ndcg),
                });
            }
        }
    }
    let at = |i: usize| lines.iter().skip(i).step_by(alphas.len().max(1));
    let summary = CavSweepSummary {
        users: users.len(),
        attrs: cavs.iter().map(|c| c.attr.clone()).collect(),
        mean_bc_spearman: (0..alphas.len())
            .map(|i| mean_opt(at(i).map(|l| l.bc_spearman)))
            .collect(),
        mean_bc_ndcg: (0..alphas.len())
            .map(|i| mean_opt(at(i).map(|l| l.bc_ndcg)))
            .collect(),
        alphas,
    };
    Ok((lines, summary))
}
