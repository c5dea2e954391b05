//! Semantic and behavioral consistency, with Spearman and NDCG as ranking
//! scores and the semantic encoder as the ranker.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{cosine, SemanticEncoder};
use crate::error::{ElmError, Result};
use crate::rng::SplitMix64;
use crate::world::{Ratings, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingScoreKind {
    Spearman,
    Ndcg,
}

/// 1-based ranks of `scores`, highest score first; tied scores share the
/// average of their ranks.
pub fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Spearman correlation of two rank vectors: Pearson correlation of the
/// ranks, which reduces to `1 − 6Σd²/(n(n²−1))` without ties. A constant
/// rank vector carries no ordering and scores 0.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ElmError::config(format!(
            "rank vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(ElmError::config("spearman needs at least two entries"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// NDCG with linear gain: `Σᵢ rel(σ(i)) / log₂(i + 1)` over 1-based
/// positions, divided by the same sum for the ideal ordering. All-zero
/// relevances score 1.
pub fn ndcg(relevances: &[f64], ranking: &[usize]) -> Result<f64> {
    let n = relevances.len();
    if ranking.len() != n {
        return Err(ElmError::config("ranking and relevances differ in length"));
    }
    let mut seen = vec![false; n];
    for &c in ranking {
        if c >= n || std::mem::replace(&mut seen[c], true) {
            return Err(ElmError::config(
                "ranking is not a permutation of the candidates",
            ));
        }
    }
    if relevances.iter().any(|&r| r < 0.0 || !r.is_finite()) {
        return Err(ElmError::config(
            "relevances must be finite and nonnegative",
        ));
    }
    let dcg = |order: &mut dyn Iterator<Item = f64>| -> f64 {
        order
            .enumerate()
            .map(|(i, rel)| rel / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal: Vec<f64> = relevances.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let best = dcg(&mut ideal.into_iter());
    if best == 0.0 {
        return Ok(1.0);
    }
    Ok(dcg(&mut ranking.iter().map(|&c| relevances[c])) / best)
}

/// Candidate order induced by `scores`, highest first, ties by index.
pub fn order_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Compares ground truth with predicted scores. Spearman uses average ranks
/// on both sides; NDCG ranks candidates by the predicted scores.
pub fn ranking_score(kind: RankingScoreKind, truth: &[f64], predicted: &[f64]) -> Result<f64> {
    match kind {
        RankingScoreKind::Spearman => spearman(&average_ranks(truth), &average_ranks(predicted)),
        RankingScoreKind::Ndcg => ndcg(truth, &order_by_scores(predicted)),
    }
}

/// Scores that reproduce `ranking` exactly: first place gets `n`, last 1.
pub fn scores_from_ranking(ranking: &[usize]) -> Vec<f64> {
    let n = ranking.len();
    let mut s = vec![0.0; n];
    for (pos, &c) in ranking.iter().enumerate() {
        s[c] = (n - pos) as f64;
    }
    s
}

pub fn semantic_consistency(
    encoder: &SemanticEncoder,
    output: &str,
    source: &[f64],
) -> Result<f64> {
    Ok(cosine(&encoder.encode(output)?, source))
}

/// Candidate indices sorted by descending cosine between the encoded
/// `query` and each candidate vector; ties by ascending id.
pub fn rank_candidates(
    encoder: &SemanticEncoder,
    query: &str,
    candidates: &[(String, Vec<f64>)],
) -> Result<Vec<usize>> {
    if candidates.len() < 2 {
        return Err(ElmError::config("ranking needs at least two candidates"));
    }
    let q = encoder.encode(query)?;
    let sims: Vec<f64> = candidates.iter().map(|(_, v)| cosine(&q, v)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .total_cmp(&sims[a])
            .then_with(|| candidates[a].0.cmp(&candidates[b].0))
    });
    Ok(order)
}

/// Entities with ground-truth relevance; unrated entities carry 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub ids: Vec<String>,
    pub relevance: Vec<f64>,
}

impl CandidateSet {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (id, r) in self.ids.iter().zip(&self.relevance) {
            h.update(id.as_bytes());
            h.update(r.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// `size` items for user `u`: up to five (or more, if `size` allows) of the
/// user's rated items, filled up with other items, sorted by id.
pub fn user_candidates(
    world: &World,
    ratings: &Ratings,
    u: usize,
    size: usize,
    seed: u64,
) -> Result<CandidateSet> {
    let n = world.items.len();
    if size < 2 || size > n {
        return Err(ElmError::config(format!(
            "candidate set size {size} outside 2..={n}"
        )));
    }
    let mut rng = SplitMix64::stream(seed, &format!("candidates/{}", world.users[u].id));
    let mut rated: Vec<usize> = (0..n).filter(|&i| ratings.get(u, i).is_some()).collect();
    rng.shuffle(&mut rated);
    let mut chosen: Vec<usize> = rated.iter().copied().take(5.min(size)).collect();
    let mut rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
    rng.shuffle(&mut rest);
    chosen.extend(rest.into_iter().take(size - chosen.len()));
    chosen.sort_unstable();
    Ok(CandidateSet {
        ids: chosen.iter().map(|&i| world.items[i].id.clone()).collect(),
        relevance: chosen
            .iter()
            .map(|&i| ratings.get(u, i).map_or(0.0, f64::from))
            .collect(),
    })
}

/// `size` users for item `m`, chosen the same way as [`user_candidates`].
pub fn item_candidates(
    world: &World,
    ratings: &Ratings,
    m: usize,
    size: usize,
    seed: u64,
) -> Result<CandidateSet> {
    let n = world.users.len();
    if size < 2 || size > n {
        return Err(ElmError::config(format!(
            "candidate set size {size} outside 2..={n}"
        )));
    }
    let mut rng = SplitMix64::stream(seed, &format!("candidates/{}", world.items[m].id));
    let mut rated: Vec<usize> = (0..n).filter(|&u| ratings.get(u, m).is_some()).collect();
    rng.shuffle(&mut rated);
    let mut chosen: Vec<usize> = rated.iter().copied().take(5.min(size)).collect();
    let mut rest: Vec<usize> = (0..n).filter(|u| !chosen.contains(u)).collect();
    rng.shuffle(&mut rest);
    chosen.extend(rest.into_iter().take(size - chosen.len()));
    chosen.sort_unstable();
    Ok(CandidateSet {
        ids: chosen.iter().map(|&u| world.users[u].id.clone()).collect(),
        relevance: chosen
            .iter()
            .map(|&u| ratings.get(u, m).map_or(0.0, f64::from))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcScores {
    pub spearman: f64,
    pub ndcg: f64,
}

/// Ranks candidates by similarity to `text` and scores the ranking against
/// the ground-truth relevances. `vectors` holds one vector per candidate.
pub fn behavioral_consistency(
    encoder: &SemanticEncoder,
    text: &str,
    set: &CandidateSet,
    vectors: &[Vec<f64>],
) -> Result<BcScores> {
    if set.ids.len() < 2 {
        return Err(ElmError::config(
            "behavioral consistency needs at least two candidates",
        ));
    }
    if vectors.len() != set.ids.len() {
        return Err(ElmError::config("one vector per candidate required"));
    }
    let cands: Vec<(String, Vec<f64>)> = set
        .ids
        .iter()
        .cloned()
        .zip(vectors.iter().cloned())
        .collect();
    let predicted = scores_from_ranking(&rank_candidates(encoder, text, &cands)?);
    Ok(BcScores {
        spearman: ranking_score(RankingScoreKind::Spearman, &set.relevance, &predicted)?,
        ndcg: ranking_score(RankingScoreKind::Ndcg, &set.relevance, &predicted)?,
    })
}

/// BC of a user profile: candidate items are represented by their semantic
/// vectors.
pub fn bc_user(
    encoder: &SemanticEncoder,
    profile: &str,
    set: &CandidateSet,
    item_vectors: &[Vec<f64>],
) -> Result<BcScores> {
    behavioral_consistency(encoder, profile, set, item_vectors)
}

/// BC of an item description: candidate users are represented by the
/// encodings of their ground-truth profile texts.
pub fn bc_movie(
    encoder: &SemanticEncoder,
    text: &str,
    set: &CandidateSet,
    user_profiles: &[String],
) -> Result<BcScores> {
    let vectors = user_profiles
        .iter()
        .map(|t| encoder.encode(t))
        .collect::<Result<Vec<_>>>()?;
    behavioral_consistency(encoder, text, set, &vectors)
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub task: String,
    pub id: String,
    pub text: String,
    pub sc: Option<f64>,
    pub bc_spearman: Option<f64>,
    pub bc_ndcg: Option<f64>,
    pub candidates: Option<String>,
    pub encoder: String,
}
