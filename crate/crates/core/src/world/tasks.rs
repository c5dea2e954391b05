use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::text::{render_task_text, Subject};
use super::{Ratings, World};
use crate::embed::SpaceKind;
use crate::error::{ElmError, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Summary,
    PositiveReview,
    NegativeReview,
    PositiveCharacteristics,
    NegativeCharacteristics,
    Similarities,
    Interpolation,
    UserProfile,
}

impl TaskKind {
    pub fn slots(&self) -> usize {
        match self {
            TaskKind::Similarities | TaskKind::Interpolation => 2,
            _ => 1,
        }
    }

    pub fn space(&self) -> SpaceKind {
        match self {
            TaskKind::UserProfile => SpaceKind::Behavioral,
            _ => SpaceKind::Semantic,
        }
    }
}

/// A task: id, prompt template with `{0}` (and `{1}`) embedding slots and
/// the rendering rule for its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    pub template: String,
}

impl TaskSpec {
    fn new(id: &str, kind: TaskKind, template: &str) -> Self {
        TaskSpec {
            id: id.to_string(),
            kind,
            template: template.to_string(),
        }
    }

    /// Prompt with each slot replaced by the sentinel of `ids[i]`.
    pub fn render_input(&self, ids: &[&str]) -> Result<String> {
        if ids.len() != self.kind.slots() {
            return Err(ElmError::config(format!(
                "task {} takes {} embedding slots, got {}",
                self.id,
                self.kind.slots(),
                ids.len()
            )));
        }
        let space = self.kind.space();
        let mut s = self.template.clone();
        for (i, id) in ids.iter().enumerate() {
            let sentinel = Sentinel {
                id: id.to_string(),
                space,
            };
            s = s.replace(&format!("{{{i}}}"), &sentinel.to_string());
        }
        Ok(s)
    }
}

pub fn default_task_specs() -> Vec<TaskSpec> {
    vec![
        TaskSpec::new(
            "summary",
            TaskKind::Summary,
            "Write a summary of the item {0}.",
        ),
        TaskSpec::new(
            "positive_review",
            TaskKind::PositiveReview,
            "Write a positive review of the item {0}.",
        ),
        TaskSpec::new(
            "negative_review",
            TaskKind::NegativeReview,
            "Write a negative review of the item {0}.",
        ),
        TaskSpec::new(
            "five_positive",
            TaskKind::PositiveCharacteristics,
            "List five positive characteristics of the item {0}.",
        ),
        TaskSpec::new(
            "five_negative",
            TaskKind::NegativeCharacteristics,
            "List five negative characteristics of the item {0}.",
        ),
        TaskSpec::new(
            "similarities",
            TaskKind::Similarities,
            "What do the items {0} and {1} have in common?",
        ),
        TaskSpec::new(
            "interpolation",
            TaskKind::Interpolation,
            "Describe an item between {0} and {1}.",
        ),
        TaskSpec::new(
            "user_profile",
            TaskKind::UserProfile,
            "Describe the user {0} in ten bullet points.",
        ),
    ]
}

/// Embedding slot marker `⟨EMB:<id>|<space>⟩`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentinel {
    pub id: String,
    pub space: SpaceKind,
}

impl fmt::Display for Sentinel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "⟨EMB:{}|{}⟩", self.id, self.space)
    }
}

pub(crate) const SENTINEL_OPEN: &str = "⟨EMB:";
pub(crate) const SENTINEL_CLOSE: char = '⟩';

impl Sentinel {
    /// Splits `text` into literal segments and sentinels, in order.
    pub fn split(text: &str) -> Result<Vec<std::result::Result<&str, Sentinel>>> {
        let mut out = Vec::new();
        let mut rest = text;
        while let Some(pos) = rest.find(SENTINEL_OPEN) {
            if pos > 0 {
                out.push(Ok(&rest[..pos]));
            }
            let body_start = pos + SENTINEL_OPEN.len();
            let close = rest[body_start..]
                .find(SENTINEL_CLOSE)
                .ok_or_else(|| ElmError::format(format!("unterminated sentinel in {text:?}")))?;
            let body = &rest[body_start..body_start + close];
            let (id, space) = body
                .split_once('|')
                .ok_or_else(|| ElmError::format(format!("sentinel without space kind: {body}")))?;
            if id.is_empty() {
                return Err(ElmError::format("sentinel with empty id"));
            }
            out.push(Err(Sentinel {
                id: id.to_string(),
                space: space.parse()?,
            }));
            rest = &rest[body_start + close + SENTINEL_CLOSE.len_utf8()..];
        }
        if !rest.is_empty() {
            out.push(Ok(rest));
        }
        Ok(out)
    }

    pub fn find_all(text: &str) -> Result<Vec<Sentinel>> {
        Ok(Self::split(text)?
            .into_iter()
            .filter_map(|p| p.err())
            .collect())
    }
}

/// One (input, target) training pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task: String,
    pub input: String,
    pub target: String,
}

/// How partners are chosen for two-slot tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairPolicy {
    #[default]
    Random,
    /// Closest other item by Euclidean attribute distance.
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskSplit {
    pub train: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
    /// Human-readable reasons for skipped instances.
    pub skipped: Vec<String>,
    pub train_items: Vec<usize>,
    pub test_items: Vec<usize>,
    pub train_users: Vec<usize>,
    pub test_users: Vec<usize>,
}

/// Shuffles `0..n` with the `purpose` stream of `seed` and returns the first
/// `round(ratio · n)` indices (sorted) as train and the rest as test.
pub fn split_entities(n: usize, ratio: f64, seed: u64, purpose: &str) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    SplitMix64::stream(seed, purpose).shuffle(&mut idx);
    let cut = ((ratio * n as f64).round() as usize).min(n);
    let mut train = idx[..cut].to_vec();
    let mut test = idx[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn partner(
    world: &World,
    a: usize,
    pool: &[usize],
    policy: PairPolicy,
    rng: &mut SplitMix64,
) -> Option<usize> {
    let others: Vec<usize> = pool.iter().copied().filter(|&b| b != a).collect();
    if others.is_empty() {
        return None;
    }
    match policy {
        PairPolicy::Random => Some(others[rng.below(others.len())]),
        PairPolicy::Nearest => {
            let dist = |b: usize| -> f64 {
                world.items[a]
                    .attrs
                    .iter()
                    .zip(&world.items[b].attrs)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()
            };
            others
                .into_iter()
                .min_by(|&x, &y| dist(x).total_cmp(&dist(y)).then(x.cmp(&y)))
        }
    }
}

/// Builds train/test instances. Entity splits come from the world seed so
/// they do not move with `seed`, which only controls instance order.
pub fn build_task_instances(
    world: &World,
    ratings: &Ratings,
    specs: &[TaskSpec],
    split_ratio: f64,
    seed: u64,
    policy: PairPolicy,
) -> Result<TaskSplit> {
    if specs.is_empty() {
        return Err(ElmError::config("no task specs given"));
    }
    if world.items.is_empty() || world.users.is_empty() {
        return Err(ElmError::config("world has no items or no users"));
    }
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(ElmError::config("split ratio must lie in [0, 1]"));
    }
    let (train_items, test_items) = split_entities(
        world.items.len(),
        split_ratio,
        world.seed,
        "tasks/split/items",
    );
    let (train_users, test_users) = split_entities(
        world.users.len(),
        split_ratio,
        world.seed,
        "tasks/split/users",
    );
    let by_user = ratings.by_user(world.users.len());
    let mut out = TaskSplit::default();

    for (part, items, users) in [
        (0, &train_items, &train_users),
        (1, &test_items, &test_users),
    ] {
        let mut instances = Vec::new();
        for spec in specs {
            match spec.kind.slots() {
                _ if spec.kind == TaskKind::UserProfile => {
                    for &u in users.iter() {
                        let user = &world.users[u];
                        let subject = Subject::User {
                            user,
                            ratings: &by_user[u],
                        };
                        match render_task_text(spec, &subject) {
                            Ok(target) => instances.push(TaskInstance {
                                task: spec.id.clone(),
                                input: spec.render_input(&[&user.id])?,
                                target,
                            }),
                            Err(ElmError::Data(reason)) => {
                                log::info!("skipping {} for {}: {reason}", spec.id, user.id);
                                out.skipped
                                    .push(format!("{} {}: {reason}", spec.id, user.id));
                            }
                            Err(e) => return Err(e),
                        }
                    }
                }
                1 => {
                    for &i in items.iter() {
                        let item = &world.items[i];
                        instances.push(TaskInstance {
                            task: spec.id.clone(),
                            input: spec.render_input(&[&item.id])?,
                            target: render_task_text(spec, &Subject::Item(item))?,
                        });
                    }
                }
                _ => {
                    let mut rng =
                        SplitMix64::stream(world.seed, &format!("tasks/pairs/{}/{part}", spec.id));
                    for &a in items.iter() {
                        let Some(b) = partner(world, a, items, policy, &mut rng) else {
                            out.skipped
                                .push(format!("{}: fewer than two items in split", spec.id));
                            break;
                        };
                        let (ia, ib) = (&world.items[a], &world.items[b]);
                        instances.push(TaskInstance {
                            task: spec.id.clone(),
                            input: spec.render_input(&[&ia.id, &ib.id])?,
                            target: render_task_text(spec, &Subject::ItemPair(ia, ib))?,
                        });
                    }
                }
            }
        }
        let purpose = if part == 0 {
            "tasks/order/train"
        } else {
            "tasks/order/test"
        };
        SplitMix64::stream(seed, purpose).shuffle(&mut instances);
        if part == 0 {
            out.train = instances;
        } else {
            out.test = instances;
        }
    }
    out.train_items = train_items;
    out.test_items = test_items;
    out.train_users = train_users;
    out.test_users = test_users;
    Ok(out)
}

pub fn write_task_lines<W: Write>(instances: &[TaskInstance], mut out: W) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_task_file(path: &Path) -> Result<Vec<TaskInstance>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: TaskInstance = serde_json::from_str(&line)
            .map_err(|e| ElmError::format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(inst);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskFiles {
    pub train: PathBuf,
    pub test: PathBuf,
    pub split: TaskSplit,
}

/// Writes `train.jsonl` and `test.jsonl` under `dir`.
pub fn write_task_file(
    world: &World,
    ratings: &Ratings,
    specs: &[TaskSpec],
    split_ratio: f64,
    seed: u64,
    policy: PairPolicy,
    dir: &Path,
) -> Result<TaskFiles> {
    let split = build_task_instances(world, ratings, specs, split_ratio, seed, policy)?;
    std::fs::create_dir_all(dir)?;
    let train = dir.join("train.jsonl");
    let test = dir.join("test.jsonl");
    write_task_lines(
        &split.train,
        std::io::BufWriter::new(std::fs::File::create(&train)?),
    )?;
    write_task_lines(
        &split.test,
        std::io::BufWriter::new(std::fs::File::create(&test)?),
    )?;
    Ok(TaskFiles { train, test, split })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{gen_ratings, gen_world, WorldConfig};

    fn setup(n_items: usize, n_users: usize) -> (World, Ratings) {
        let w = gen_world(&WorldConfig {
            n_items,
            n_users,
            ..Default::default()
        })
        .unwrap();
        let r = gen_ratings(&w, 0.5, 0.3).unwrap();
        (w, r)
    }

    #[test]
    fn sentinel_round_trip_with_attached_punctuation() {
        let spec = &default_task_specs()[0];
        let input = spec.render_input(&["item_0042"]).unwrap();
        assert_eq!(
            input,
            "Write a summary of the item ⟨EMB:item_0042|semantic⟩."
        );
        let parts = Sentinel::split(&input).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0], Ok("Write a summary of the item "));
        assert_eq!(
            parts[1],
            Err(Sentinel {
                id: "item_0042".into(),
                space: SpaceKind::Semantic
            })
        );
        assert_eq!(parts[2], Ok("."));
        assert!(Sentinel::split("⟨EMB:item_1|semantic").is_err());
        assert!(Sentinel::split("⟨EMB:item_1|other⟩").is_err());
    }

    #[test]
    fn split_counts_follow_ratio() {
        let (train, test) = split_entities(100, 0.8, 3, "x");
        assert_eq!((train.len(), test.len()), (80, 20));
        let (w, r) = setup(100, 10);
        let specs = vec![default_task_specs()[0].clone()];
        let s = build_task_instances(&w, &r, &specs, 0.8, 1, PairPolicy::Random).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (80, 20));
    }

    #[test]
    fn single_entity_tasks_have_disjoint_entities() {
        let (w, r) = setup(60, 40);
        let s = build_task_instances(&w, &r, &default_task_specs(), 0.8, 1, PairPolicy::Random)
            .unwrap();
        let ids = |v: &[TaskInstance]| -> std::collections::HashSet<String> {
            v.iter()
                .flat_map(|i| Sentinel::find_all(&i.input).unwrap())
                .map(|s| s.id)
                .collect()
        };
        let train = ids(&s.train);
        let test = ids(&s.test);
        assert!(train.is_disjoint(&test));
        for inst in s.train.iter().chain(&s.test) {
            for sentinel in Sentinel::find_all(&inst.input).unwrap() {
                match sentinel.space {
                    SpaceKind::Semantic => assert!(w.item_index(&sentinel.id).is_some()),
                    SpaceKind::Behavioral => assert!(w.user_index(&sentinel.id).is_some()),
                }
            }
        }
    }

    #[test]
    fn order_seed_changes_order_not_multiset() {
        let (w, r) = setup(30, 30);
        let specs = default_task_specs();
        let a = build_task_instances(&w, &r, &specs, 0.8, 1, PairPolicy::Random).unwrap();
        let b = build_task_instances(&w, &r, &specs, 0.8, 2, PairPolicy::Random).unwrap();
        assert_ne!(a.train, b.train);
        let mut sa = a.train.clone();
        let mut sb = b.train.clone();
        sa.sort();
        sb.sort();
        assert_eq!(sa, sb);
    }

    #[test]
    fn nearest_policy_pairs_closest_item() {
        let (w, r) = setup(20, 5);
        let spec: Vec<TaskSpec> = default_task_specs()
            .into_iter()
            .filter(|s| s.kind == TaskKind::Similarities)
            .collect();
        let s = build_task_instances(&w, &r, &spec, 1.0, 1, PairPolicy::Nearest).unwrap();
        for inst in &s.train {
            let ids = Sentinel::find_all(&inst.input).unwrap();
            let a = w.item_index(&ids[0].id).unwrap();
            let b = w.item_index(&ids[1].id).unwrap();
            let d = |x: usize| -> f64 {
                w.items[a]
                    .attrs
                    .iter()
                    .zip(&w.items[x].attrs)
                    .map(|(p, q)| (p - q).powi(2))
                    .sum()
            };
            assert!((0..20).filter(|&x| x != a).all(|x| d(b) <= d(x)));
        }
    }

    #[test]
    fn rejects_empty_specs() {
        let (w, r) = setup(5, 5);
        assert!(matches!(
            build_task_instances(&w, &r, &[], 0.8, 1, PairPolicy::Random),
            Err(ElmError::Config(_))
        ));
    }
}
