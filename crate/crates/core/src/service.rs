//! Request-level decoding over an immutable snapshot of a trained run:
//! embedding specs (entity, interpolation, CAV shift or raw vector), greedy
//! or sampled decoding, and consistency scores against fixed candidate sets.

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, SpaceKind};
use crate::error::{ElmError, Result};
use crate::geometry::{cav_extrapolate, conform, interpolate, Cav};
use crate::metrics::{bc_movie, behavioral_consistency, CandidateSet};
use crate::model::DecodeMode;
use crate::pipeline::{predicted_relevance, read_jsonl, Artifacts, PipelineConfig, RunDir};
use crate::rng::SplitMix64;
use crate::world::{default_task_specs, user_profile_text, TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateSpec {
    pub a: String,
    pub b: String,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavSpec {
    pub base: String,
    pub attr: String,
    pub alpha: f64,
}

/// Where a slot's vector comes from. Exactly one field must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpolate: Option<InterpolateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cav: Option<CavSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
}

impl EmbeddingSpec {
    pub fn entity(id: &str) -> Self {
        EmbeddingSpec {
            entity: Some(id.to_string()),
            ..Default::default()
        }
    }

    pub fn interpolate(a: &str, b: &str, alpha: f64) -> Self {
        EmbeddingSpec {
            interpolate: Some(InterpolateSpec {
                a: a.to_string(),
                b: b.to_string(),
                alpha,
            }),
            ..Default::default()
        }
    }

    pub fn cav(base: &str, attr: &str, alpha: f64) -> Self {
        EmbeddingSpec {
            cav: Some(CavSpec {
                base: base.to_string(),
                attr: attr.to_string(),
                alpha,
            }),
            ..Default::default()
        }
    }

    fn variants(&self) -> usize {
        usize::from(self.entity.is_some())
            + usize::from(self.interpolate.is_some())
            + usize::from(self.cav.is_some())
            + usize::from(self.vector.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRequest {
    pub task: String,
    pub embedding: EmbeddingSpec,
    /// Second slot of two-slot tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second: Option<EmbeddingSpec>,
    #[serde(default = "greedy")]
    pub mode: DecodeMode,
}

fn greedy() -> DecodeMode {
    DecodeMode::Greedy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub text: String,
    pub sc: Option<f64>,
    pub bc_spearman: Option<f64>,
    pub bc_ndcg: Option<f64>,
    /// Digest of the candidate set behind the BC scores.
    pub candidates: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityInfo {
    pub id: String,
    pub name: String,
    pub spaces: Vec<SpaceKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavInfo {
    pub attr: String,
    pub space: SpaceKind,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub id: String,
    pub slots: usize,
    pub space: SpaceKind,
    pub template: String,
}

/// A resolved slot: its vector and, for plain entities, the id.
struct Slot {
    vector: Vec<f64>,
    origin: Origin,
}

enum Origin {
    Entity(String),
    /// Item interpolation, kept so behavioral ground truth can be mixed too.
    Interpolated(String, String, f64),
    Other,
}

/// Immutable serving state.
#[derive(Debug, Clone)]
pub struct Explorer {
    pub artifacts: Artifacts,
    pub cavs: Vec<Cav>,
    /// Items ranked by user-profile probes.
    pub served_items: CandidateSet,
    /// Users ranked by item probes; relevances are filled per request.
    pub served_users: Vec<String>,
}

fn served_ids(ids: Vec<String>, n: usize, seed: u64, purpose: &str) -> Vec<String> {
    let mut ids = ids;
    SplitMix64::stream(seed, purpose).shuffle(&mut ids);
    ids.truncate(n);
    ids.sort();
    ids
}

impl Explorer {
    pub fn new(artifacts: Artifacts, cavs: Vec<Cav>) -> Result<Self> {
        let e = &artifacts.config.eval;
        let w = &artifacts.world;
        if e.candidates < 2 || e.candidates > w.items.len().min(w.users.len()) {
            return Err(ElmError::config("served candidate set size out of range"));
        }
        let items = served_ids(
            w.items.iter().map(|x| x.id.clone()).collect(),
            e.candidates,
            e.seed,
            "served/items",
        );
        let served_users = served_ids(
            w.users.iter().map(|x| x.id.clone()).collect(),
            e.candidates,
            e.seed,
            "served/users",
        );
        Ok(Explorer {
            served_items: CandidateSet {
                relevance: vec![0.0; items.len()],
                ids: items,
            },
            served_users,
            artifacts,
            cavs,
        })
    }

    /// Loads a run directory; the CAV file is optional.
    pub fn load(cfg: &PipelineConfig, dir: &RunDir, checkpoint: &std::path::Path) -> Result<Self> {
        let art = Artifacts::load(cfg, dir, checkpoint)?;
        let cavs = if dir.cavs().exists() {
            read_jsonl(&dir.cavs())?
        } else {
            Vec::new()
        };
        Self::new(art, cavs)
    }

    pub fn entities(&self) -> Vec<EntityInfo> {
        let w = &self.artifacts.world;
        let spaces_of = |id: &str| -> Vec<SpaceKind> {
            [SpaceKind::Behavioral, SpaceKind::Semantic]
                .into_iter()
                .filter(|&s| {
                    self.artifacts
                        .tables
                        .get(s)
                        .is_some_and(|t| t.get(id).is_some())
                })
                .collect()
        };
        let items = w.items.iter().map(|it| EntityInfo {
            id: it.id.clone(),
            name: it.name.clone(),
            spaces: spaces_of(&it.id),
        });
        let users = w.users.iter().map(|u| EntityInfo {
            id: u.id.clone(),
            name: u.id.clone(),
            spaces: spaces_of(&u.id),
        });
        items.chain(users).collect()
    }

    pub fn cav_list(&self) -> Vec<CavInfo> {
        self.cavs
            .iter()
            .map(|c| CavInfo {
                attr: c.attr.clone(),
                space: c.space,
                acc: c.acc,
            })
            .collect()
    }

    pub fn tasks(&self) -> Vec<TaskInfo> {
        default_task_specs()
            .into_iter()
            .map(|s| TaskInfo {
                slots: s.kind.slots(),
                space: s.kind.space(),
                id: s.id,
                template: s.template,
            })
            .collect()
    }

    fn spec(&self, task: &str) -> Result<TaskSpec> {
        default_task_specs()
            .into_iter()
            .find(|s| s.id == task)
            .ok_or_else(|| ElmError::data(format!("unknown task {task}")))
    }

    fn lookup(&self, space: SpaceKind, id: &str) -> Result<&[f64]> {
        self.artifacts
            .tables
            .get(space)
            .and_then(|t| t.get(id))
            .ok_or_else(|| ElmError::data(format!("unknown {space} entity {id}")))
    }

    fn resolve(&self, space: SpaceKind, spec: &EmbeddingSpec) -> Result<Slot> {
        if spec.variants() != 1 {
            return Err(ElmError::config(
                "embedding spec needs exactly one of entity, interpolate, cav, vector",
            ));
        }
        if let Some(id) = &spec.entity {
            return Ok(Slot {
                vector: self.lookup(space, id)?.to_vec(),
                origin: Origin::Entity(id.clone()),
            });
        }
        if let Some(i) = &spec.interpolate {
            if !i.alpha.is_finite() {
                return Err(ElmError::config("alpha must be finite"));
            }
            let v = interpolate(
                self.lookup(space, &i.a)?,
                self.lookup(space, &i.b)?,
                i.alpha,
            )?;
            return Ok(Slot {
                vector: conform(space, v)?,
                origin: Origin::Interpolated(i.a.clone(), i.b.clone(), i.alpha),
            });
        }
        if let Some(c) = &spec.cav {
            let base = self.lookup(space, &c.base)?;
            let cav = self
                .cavs
                .iter()
                .find(|x| x.attr == c.attr && x.space == space)
                .ok_or_else(|| {
                    ElmError::data(format!("no {space} CAV for attribute {}", c.attr))
                })?;
            return Ok(Slot {
                vector: cav_extrapolate(base, space, cav, c.alpha)?,
                origin: Origin::Other,
            });
        }
        let v = spec.vector.as_ref().expect("one variant set");
        let dim = self
            .artifacts
            .tables
            .get(space)
            .map(|t| t.dim)
            .ok_or_else(|| ElmError::config(format!("no {space} table loaded")))?;
        if v.len() != dim || v.iter().any(|x| !x.is_finite()) {
            return Err(ElmError::config(format!(
                "raw vector must hold {dim} finite values"
            )));
        }
        Ok(Slot {
            vector: conform(space, v.clone())?,
            origin: Origin::Other,
        })
    }

    pub fn decode(&self, req: &DecodeRequest) -> Result<DecodeResponse> {
        let spec = self.spec(&req.task)?;
        let space = spec.kind.space();
        let mut slots = vec![self.resolve(space, &req.embedding)?];
        match (&req.second, spec.kind.slots()) {
            (Some(s), 2) => slots.push(self.resolve(space, s)?),
            (None, 1) => {}
            (_, n) => {
                return Err(ElmError::config(format!(
                    "task {} takes {n} embedding specs",
                    req.task
                )))
            }
        }
        let vectors: Vec<Vec<f64>> = slots.iter().map(|s| s.vector.clone()).collect();
        let text = match (&slots[0].origin, slots.len()) {
            // Entity requests go through the stored-id path so that they
            // match batch evaluation exactly.
            (Origin::Entity(id), 1) => self
                .artifacts
                .decode_input(&spec.render_input(&[id])?, req.mode)?,
            _ => self
                .artifacts
                .decode_vectors(&req.task, &vectors, req.mode)?,
        };
        self.score(spec.kind, &slots, text)
    }

    fn score(&self, kind: TaskKind, slots: &[Slot], text: String) -> Result<DecodeResponse> {
        let mut resp = DecodeResponse {
            text,
            sc: None,
            bc_spearman: None,
            bc_ndcg: None,
            candidates: None,
        };
        let art = &self.artifacts;
        let Ok(e) = art.encoder.encode(&resp.text) else {
            return Ok(resp);
        };
        let bc = match kind {
            TaskKind::UserProfile => {
                let w = &slots[0].vector;
                if let Origin::Entity(id) = &slots[0].origin {
                    let u = art
                        .world
                        .user_index(id)
                        .ok_or_else(|| ElmError::data(format!("unknown user {id}")))?;
                    resp.sc = Some(cosine(
                        &e,
                        &art.encoder
                            .encode(&user_profile_text(&art.world.users[u]))?,
                    ));
                }
                let truth = predicted_relevance(art, w, &self.served_items.ids)?;
                let vecs = truth
                    .ids
                    .iter()
                    .map(|id| art.semantic().require(id).map(<[f64]>::to_vec))
                    .collect::<Result<Vec<_>>>()?;
                Some((
                    behavioral_consistency(&art.encoder, &resp.text, &truth, &vecs)?,
                    truth.digest(),
                ))
            }
            _ if slots.len() == 2 => {
                let mid = conform(
                    SpaceKind::Semantic,
                    interpolate(&slots[0].vector, &slots[1].vector, 0.5)?,
                )?;
                resp.sc = Some(cosine(&e, &mid));
                None
            }
            _ => {
                resp.sc = Some(cosine(&e, &slots[0].vector));
                let relevance: Option<Vec<f64>> = match &slots[0].origin {
                    Origin::Entity(id) => {
                        let m = art
                            .world
                            .item_index(id)
                            .ok_or_else(|| ElmError::data(format!("unknown item {id}")))?;
                        Some(
                            self.served_users
                                .iter()
                                .map(|u| {
                                    let u = art.world.user_index(u).expect("served users exist");
                                    art.ratings.get(u, m).map_or(0.0, f64::from)
                                })
                                .collect(),
                        )
                    }
                    Origin::Interpolated(a, b, alpha) => {
                        let beh = art.behavioral();
                        let v = interpolate(beh.require(a)?, beh.require(b)?, *alpha)?;
                        Some(
                            self.served_users
                                .iter()
                                .map(|u| Ok(crate::embed::dot(beh.require(u)?, &v).max(0.0)))
                                .collect::<Result<_>>()?,
                        )
                    }
                    Origin::Other => None,
                };
                match relevance {
                    Some(relevance) => {
                        let set = CandidateSet {
                            ids: self.served_users.clone(),
                            relevance,
                        };
                        let profiles: Vec<String> = set
                            .ids
                            .iter()
                            .map(|u| {
                                user_profile_text(
                                    &art.world.users
                                        [art.world.user_index(u).expect("served users exist")],
                                )
                            })
                            .collect();
                        Some((
                            bc_movie(&art.encoder, &resp.text, &set, &profiles)?,
                            set.digest(),
                        ))
                    }
                    None => None,
                }
            }
        };
        if let Some((s, digest)) = bc {
            resp.bc_spearman = Some(s.spearman);
            resp.bc_ndcg = Some(s.ndcg);
            resp.candidates = Some(digest);
        }
        Ok(resp)
    }
}
