//! Decoding held-out instances and scoring them for semantic and behavioral
//! consistency.

use serde::{Deserialize, Serialize};

use super::Artifacts;
use crate::embed::{cosine, SpaceKind};
use crate::error::{ElmError, Result};
use crate::geometry::{conform, interpolate};
use crate::metrics::{
    bc_movie, bc_user, item_candidates, user_candidates, BcScores, CandidateSet, ConsistencyReport,
};
use crate::model::{build_prompt, decode_text, DecodeMode};
use crate::rng::SplitMix64;
use crate::world::{default_task_specs, user_profile_text, Sentinel, TaskInstance, TaskKind};

fn task_kind(task: &str) -> Result<TaskKind> {
    default_task_specs()
        .into_iter()
        .find(|s| s.id == task)
        .map(|s| s.kind)
        .ok_or_else(|| ElmError::data(format!("unknown task {task}")))
}

impl Artifacts {
    /// Greedy decode of a task prompt.
    pub fn decode_input(&self, input: &str, mode: DecodeMode) -> Result<String> {
        let ck = &self.checkpoint;
        let prompt = build_prompt(&ck.vocab, input, |s| self.tables.resolve(s))?;
        decode_text(
            &ck.model,
            &ck.vocab,
            &prompt,
            self.config.eval.max_len,
            mode,
        )
    }

    fn item(&self, id: &str) -> Result<usize> {
        self.world
            .item_index(id)
            .ok_or_else(|| ElmError::data(format!("unknown item {id}")))
    }

    fn user(&self, id: &str) -> Result<usize> {
        self.world
            .user_index(id)
            .ok_or_else(|| ElmError::data(format!("unknown user {id}")))
    }

    /// Candidate users of an item with their ground-truth profile texts.
    pub fn item_candidate_set(&self, item: usize) -> Result<(CandidateSet, Vec<String>)> {
        let e = &self.config.eval;
        let set = item_candidates(&self.world, &self.ratings, item, e.candidates, e.seed)?;
        let profiles = set
            .ids
            .iter()
            .map(|id| Ok(user_profile_text(&self.world.users[self.user(id)?])))
            .collect::<Result<_>>()?;
        Ok((set, profiles))
    }

    /// Candidate items of a user with their semantic vectors.
    pub fn user_candidate_set(&self, user: usize) -> Result<(CandidateSet, Vec<Vec<f64>>)> {
        let e = &self.config.eval;
        let set = user_candidates(&self.world, &self.ratings, user, e.candidates, e.seed)?;
        let vecs = set
            .ids
            .iter()
            .map(|id| self.semantic().require(id).map(<[f64]>::to_vec))
            .collect::<Result<_>>()?;
        Ok((set, vecs))
    }

    /// Reference vector for SC: the item vector, the conformed midpoint of a
    /// pair, or the encoding of the user's true profile.
    pub fn sc_reference(&self, kind: TaskKind, ids: &[String]) -> Result<Vec<f64>> {
        match (kind, ids) {
            (TaskKind::UserProfile, [u]) => self
                .encoder
                .encode(&user_profile_text(&self.world.users[self.user(u)?])),
            (_, [a]) => self.semantic().require(a).map(<[f64]>::to_vec),
            (_, [a, b]) => conform(
                SpaceKind::Semantic,
                interpolate(
                    self.semantic().require(a)?,
                    self.semantic().require(b)?,
                    0.5,
                )?,
            ),
            _ => Err(ElmError::data(format!(
                "{kind:?} prompt with {} slots",
                ids.len()
            ))),
        }
    }

    /// Scores `text` produced for `ids` under a task of `kind`. Empty output
    /// gets no scores.
    pub fn score(
        &self,
        task: &str,
        kind: TaskKind,
        ids: &[String],
        text: &str,
    ) -> Result<ConsistencyReport> {
        let mut rep = ConsistencyReport {
            task: task.to_string(),
            id: ids.join("+"),
            sc: None,
            bc_spearman: None,
            bc_ndcg: None,
            candidates: None,
            text: text.to_string(),
            encoder: self.encoder.digest(),
        };
        if text.trim().is_empty() {
            return Ok(rep);
        }
        rep.sc = Some(cosine(
            &self.encoder.encode(text)?,
            &self.sc_reference(kind, ids)?,
        ));
        let bc: Option<(BcScores, String)> = match (kind, ids) {
            (TaskKind::UserProfile, [u]) => {
                let (set, vecs) = self.user_candidate_set(self.user(u)?)?;
                Some((bc_user(&self.encoder, text, &set, &vecs)?, set.digest()))
            }
            (_, [m]) => {
                let (set, profiles) = self.item_candidate_set(self.item(m)?)?;
                Some((
                    bc_movie(&self.encoder, text, &set, &profiles)?,
                    set.digest(),
                ))
            }
            _ => None,
        };
        if let Some((s, digest)) = bc {
            rep.bc_spearman = Some(s.spearman);
            rep.bc_ndcg = Some(s.ndcg);
            rep.candidates = Some(digest);
        }
        Ok(rep)
    }
}

/// Greedy decode and consistency scores for every instance, in order.
pub fn evaluate(art: &Artifacts, instances: &[TaskInstance]) -> Result<Vec<ConsistencyReport>> {
    instances
        .iter()
        .map(|inst| {
            let kind = task_kind(&inst.task)?;
            let ids: Vec<String> = Sentinel::find_all(&inst.input)?
                .into_iter()
                .map(|s| s.id)
                .collect();
            let text = art.decode_input(&inst.input, DecodeMode::Greedy)?;
            art.score(&inst.task, kind, &ids, &text)
        })
        .collect()
}

/// How well summaries of held-out items identify their source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryProbe {
    pub items: usize,
    /// Share of items whose re-embedded summary is nearest to their own
    /// vector among the held-out items.
    pub nn_accuracy: f64,
    pub mean_sc_own: f64,
    /// Mean cosine to a random other held-out item.
    pub mean_sc_other: f64,
    pub gap: f64,
}

pub fn summary_generalization(
    art: &Artifacts,
    reports: &[ConsistencyReport],
) -> Result<SummaryProbe> {
    let rows: Vec<(&str, &str)> = reports
        .iter()
        .filter(|r| r.task == "summary")
        .map(|r| (r.id.as_str(), r.text.as_str()))
        .collect();
    if rows.len() < 2 {
        return Err(ElmError::data("summary probe needs at least two summaries"));
    }
    let sources: Vec<&[f64]> = rows
        .iter()
        .map(|(id, _)| art.semantic().require(id))
        .collect::<Result<_>>()?;
    let mut rng = SplitMix64::stream(art.config.eval.seed, "summary-probe/other");
    let (mut hits, mut own, mut other) = (0usize, 0.0, 0.0);
    for (i, (_, text)) in rows.iter().enumerate() {
        let Ok(e) = art.encoder.encode(text) else {
            // Empty output: no hit, zero similarity either way.
            rng.below(rows.len() - 1);
            continue;
        };
        let sims: Vec<f64> = sources.iter().map(|s| cosine(&e, s)).collect();
        let best = (0..sims.len())
            .max_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(b.cmp(&a)))
            .expect("non-empty");
        hits += usize::from(best == i);
        own += sims[i];
        let mut j = rng.below(rows.len() - 1);
        if j >= i {
            j += 1;
        }
        other += sims[j];
    }
    let n = rows.len() as f64;
    Ok(SummaryProbe {
        items: rows.len(),
        nn_accuracy: hits as f64 / n,
        mean_sc_own: own / n,
        mean_sc_other: other / n,
        gap: (own - other) / n,
    })
}
