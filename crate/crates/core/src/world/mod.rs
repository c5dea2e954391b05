//! Deterministic synthetic universe: items with named attributes, users with
//! preference weights, sparse 1–5 ratings, rendered texts and task files.

mod ratings;
mod tasks;
mod text;

pub use ratings::{gen_ratings, rating_rule, read_ratings_csv, write_ratings_csv, Rating, Ratings};
pub use tasks::{
    build_task_instances, default_task_specs, read_task_file, split_entities, write_task_file,
    write_task_lines, PairPolicy, Sentinel, TaskFiles, TaskInstance, TaskKind, TaskSpec, TaskSplit,
};
pub use text::{
    attribute_adjectives, bucket, item_semantic_source, render_task_text, user_profile_text,
    Bucket, Subject, PROFILE_MIN_NEGATIVE, PROFILE_MIN_POSITIVE,
};

use serde::{Deserialize, Serialize};

use crate::error::{ElmError, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_attrs: usize,
    /// Mean of every item attribute; attributes are drawn as `u^γ` with
    /// `u ~ U[0,1)` and `γ = (1 − mean) / mean`.
    pub attr_mean: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 7,
            n_users: 500,
            n_items: 200,
            n_attrs: 8,
            attr_mean: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub name: String,
    pub attrs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub id: String,
    pub prefs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub attr_mean: f64,
    pub attr_names: Vec<String>,
    pub items: Vec<Item>,
    pub users: Vec<User>,
}

pub fn item_id(i: usize) -> String {
    format!("item_{i:04}")
}

pub fn user_id(u: usize) -> String {
    format!("user_{u:04}")
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mer", "vin", "ta", "shu", "ren", "do", "bel", "qui", "za", "mor", "fen", "li",
    "tar", "os",
];

fn title_word(rng: &mut SplitMix64) -> String {
    let n = 2 + rng.below(2);
    let w: String = (0..n)
        .map(|_| SYLLABLES[rng.below(SYLLABLES.len())])
        .collect();
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => w,
    }
}

pub fn gen_world(cfg: &WorldConfig) -> Result<World> {
    if cfg.n_users == 0 || cfg.n_items == 0 {
        return Err(ElmError::config(
            "world needs at least one user and one item",
        ));
    }
    if cfg.n_attrs < 2 {
        return Err(ElmError::config("world needs at least two attributes"));
    }
    if !(cfg.attr_mean > 0.0 && cfg.attr_mean < 1.0) {
        return Err(ElmError::config("attribute mean must lie in (0, 1)"));
    }
    let gamma = (1.0 - cfg.attr_mean) / cfg.attr_mean;
    let mut item_rng = SplitMix64::stream(cfg.seed, "world/items");
    let mut name_rng = SplitMix64::stream(cfg.seed, "world/names");
    let items = (0..cfg.n_items)
        .map(|i| Item {
            id: item_id(i),
            name: format!(
                "{} {}",
                title_word(&mut name_rng),
                title_word(&mut name_rng)
            ),
            attrs: (0..cfg.n_attrs)
                .map(|_| item_rng.uniform().powf(gamma))
                .collect(),
        })
        .collect();
    let mut user_rng = SplitMix64::stream(cfg.seed, "world/users");
    let users = (0..cfg.n_users)
        .map(|u| User {
            id: user_id(u),
            prefs: (0..cfg.n_attrs)
                .map(|_| user_rng.uniform_range(-1.0, 1.0))
                .collect(),
        })
        .collect();
    Ok(World {
        seed: cfg.seed,
        attr_mean: cfg.attr_mean,
        attr_names: text::attribute_names(cfg.n_attrs),
        items,
        users,
    })
}

impl World {
    pub fn n_attrs(&self) -> usize {
        self.attr_names.len()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        parse_index(id, "item_").filter(|&i| i < self.items.len())
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        parse_index(id, "user_").filter(|&i| i < self.users.len())
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attr_names.iter().position(|a| a == name)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let w: World = serde_json::from_slice(bytes)?;
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_attrs();
        for (i, it) in self.items.iter().enumerate() {
            if it.id != item_id(i) {
                return Err(ElmError::format(format!("item {i} has id {}", it.id)));
            }
            if it.attrs.len() != k || it.attrs.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(ElmError::format(format!(
                    "item {} attributes out of range",
                    it.id
                )));
            }
        }
        for (u, us) in self.users.iter().enumerate() {
            if us.id != user_id(u) {
                return Err(ElmError::format(format!("user {u} has id {}", us.id)));
            }
            if us.prefs.len() != k || us.prefs.iter().any(|p| !(-1.0..=1.0).contains(p)) {
                return Err(ElmError::format(format!(
                    "user {} preferences out of range",
                    us.id
                )));
            }
        }
        Ok(())
    }
}

fn parse_index(id: &str, prefix: &str) -> Option<usize> {
    id.strip_prefix(prefix)?.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = WorldConfig {
            n_users: 50,
            n_items: 40,
            ..Default::default()
        };
        let a = gen_world(&cfg).unwrap().to_json().unwrap();
        let b = gen_world(&cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let other = gen_world(&WorldConfig { seed: 8, ..cfg })
            .unwrap()
            .to_json()
            .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn attributes_in_range() {
        let w = gen_world(&WorldConfig {
            n_items: 200,
            n_users: 3,
            n_attrs: 5,
            ..Default::default()
        })
        .unwrap();
        assert!(w.items.iter().all(|i| i.attrs.len() == 5));
        assert!(w
            .items
            .iter()
            .flat_map(|i| &i.attrs)
            .all(|a| (0.0..=1.0).contains(a)));
        assert!(w
            .users
            .iter()
            .flat_map(|u| &u.prefs)
            .all(|p| (-1.0..=1.0).contains(p)));
    }

    #[test]
    fn attribute_mean_matches_configuration() {
        // E[u^γ] = 1 / (γ + 1) = configured mean.
        for mean in [0.5, 0.3, 0.7] {
            let w = gen_world(&WorldConfig {
                n_items: 10_000,
                n_users: 1,
                n_attrs: 2,
                attr_mean: mean,
                ..Default::default()
            })
            .unwrap();
            let m = w.items.iter().map(|i| i.attrs[0]).sum::<f64>() / 10_000.0;
            assert!((m - mean).abs() < 0.02, "mean {m} vs {mean}");
        }
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(gen_world(&WorldConfig {
            n_attrs: 1,
            ..Default::default()
        })
        .is_err());
        assert!(gen_world(&WorldConfig {
            n_items: 0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn json_round_trip() {
        let w = gen_world(&WorldConfig {
            n_users: 5,
            n_items: 5,
            ..Default::default()
        })
        .unwrap();
        let back = World::from_json(&w.to_json().unwrap()).unwrap();
        assert_eq!(w, back);
    }
}
