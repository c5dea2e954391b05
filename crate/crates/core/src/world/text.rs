//! Phrase-bank rendering of task targets. Every rendered text is already in
//! canonical token form (lowercase words and punctuation separated by single
//! spaces) so tokenizing and re-joining it is the identity.

use super::tasks::{TaskKind, TaskSpec};
use super::{Item, User};
use crate::error::{ElmError, Result};

/// Attribute name and its adjectives for the low, mid and high buckets.
const BANK: [(&str, [&str; 3]); 12] = [
    ("funny", ["humorless", "amusing", "hilarious"]),
    ("scary", ["gentle", "tense", "terrifying"]),
    ("romantic", ["unromantic", "tender", "passionate"]),
    ("violent", ["peaceful", "gritty", "brutal"]),
    ("thoughtful", ["shallow", "reflective", "profound"]),
    ("dramatic", ["understated", "emotional", "melodramatic"]),
    ("fast-paced", ["sluggish", "steady", "frantic"]),
    ("musical", ["unmusical", "melodic", "operatic"]),
    ("visual", ["drab", "colorful", "dazzling"]),
    ("complex", ["simple", "layered", "labyrinthine"]),
    ("nostalgic", ["modern", "wistful", "retro"]),
    ("quirky", ["conventional", "offbeat", "bizarre"]),
];

pub const PROFILE_MIN_POSITIVE: usize = 5;
pub const PROFILE_MIN_NEGATIVE: usize = 5;

pub(crate) fn attribute_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|i| match BANK.get(i) {
            Some((name, _)) => name.to_string(),
            None => format!("attr{i}"),
        })
        .collect()
}

/// Adjectives (low, mid, high) of attribute `k`.
pub fn attribute_adjectives(k: usize) -> [String; 3] {
    match BANK.get(k) {
        Some((_, adj)) => adj.map(str::to_string),
        None => ["low", "mid", "high"].map(|b| format!("attr{k}-{b}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Bucket {
    Low,
    Mid,
    High,
}

/// Half-open buckets `[0, 1/3)`, `[1/3, 2/3)`, `[2/3, 1]`.
pub fn bucket(v: f64) -> Bucket {
    if v < 1.0 / 3.0 {
        Bucket::Low
    } else if v < 2.0 / 3.0 {
        Bucket::Mid
    } else {
        Bucket::High
    }
}

fn adjective(k: usize, v: f64) -> String {
    let adj = attribute_adjectives(k);
    adj[bucket(v) as usize].clone()
}

/// Entity record a task is rendered from.
#[derive(Debug, Clone, Copy)]
pub enum Subject<'a> {
    Item(&'a Item),
    ItemPair(&'a Item, &'a Item),
    User {
        user: &'a User,
        /// The user's (item index, rating) pairs.
        ratings: &'a [(usize, u8)],
    },
}

/// Attribute indices ordered by value, descending (`top`) or ascending;
/// ties go to the lower index.
fn ranked(values: &[f64], top: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = values[a].total_cmp(&values[b]);
        let o = if top { o.reverse() } else { o };
        o.then(a.cmp(&b))
    });
    idx
}

fn join_adjectives(values: &[f64], order: impl Iterator<Item = usize>, marker: &str) -> String {
    order
        .map(|k| format!("{marker}{}", adjective(k, values[k])))
        .collect::<Vec<_>>()
        .join(" ; ")
}

fn summary(attrs: &[f64]) -> String {
    format!("{} .", join_adjectives(attrs, 0..attrs.len(), ""))
}

fn review(attrs: &[f64], positive: bool) -> String {
    let order = ranked(attrs, positive);
    let head = if positive {
        "loved it :"
    } else {
        "disliked it :"
    };
    format!(
        "{head} {} .",
        join_adjectives(attrs, order.into_iter().take(2), "")
    )
}

fn characteristics(attrs: &[f64], positive: bool) -> String {
    let order = ranked(attrs, positive);
    let marker = if positive { "+ " } else { "- " };
    format!(
        "{} .",
        join_adjectives(attrs, order.into_iter().take(5), marker)
    )
}

fn similarities(a: &[f64], b: &[f64]) -> String {
    let shared: Vec<String> = (0..a.len())
        .filter(|&k| bucket(a[k]) == bucket(b[k]))
        .map(|k| adjective(k, a[k]))
        .collect();
    if shared.is_empty() {
        "both : nothing .".to_string()
    } else {
        format!("both : {} .", shared.join(" ; "))
    }
}

fn midpoint(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Ten bullets: the five strongest preferences followed by the five weakest,
/// each naming the adjective of the preference rescaled to [0, 1].
fn profile(prefs: &[f64]) -> String {
    let scaled: Vec<f64> = prefs.iter().map(|p| (p + 1.0) / 2.0).collect();
    let top = ranked(&scaled, true);
    let bottom = ranked(&scaled, false);
    let order: Vec<usize> = top
        .iter()
        .cycle()
        .take(5)
        .chain(bottom.iter().cycle().take(5))
        .copied()
        .collect();
    let bullets: Vec<String> = order
        .into_iter()
        .map(|k| format!("* {} ;", adjective(k, scaled[k])))
        .collect();
    bullets.join(" ")
}

/// Renders the target text of `spec` for `subject`.
pub fn render_task_text(spec: &TaskSpec, subject: &Subject<'_>) -> Result<String> {
    let mismatch = || {
        ElmError::config(format!(
            "task {} cannot be rendered for this subject",
            spec.id
        ))
    };
    match (spec.kind, subject) {
        (TaskKind::Summary, Subject::Item(it)) => Ok(summary(&it.attrs)),
        (TaskKind::PositiveReview, Subject::Item(it)) => Ok(review(&it.attrs, true)),
        (TaskKind::NegativeReview, Subject::Item(it)) => Ok(review(&it.attrs, false)),
        (TaskKind::PositiveCharacteristics, Subject::Item(it)) => {
            Ok(characteristics(&it.attrs, true))
        }
        (TaskKind::NegativeCharacteristics, Subject::Item(it)) => {
            Ok(characteristics(&it.attrs, false))
        }
        (TaskKind::Similarities, Subject::ItemPair(a, b)) => Ok(similarities(&a.attrs, &b.attrs)),
        (TaskKind::Interpolation, Subject::ItemPair(a, b)) => {
            Ok(summary(&midpoint(&a.attrs, &b.attrs)))
        }
        (TaskKind::UserProfile, Subject::User { user, ratings }) => {
            let pos = ratings.iter().filter(|(_, r)| *r >= 4).count();
            let neg = ratings.iter().filter(|(_, r)| *r <= 2).count();
            if pos < PROFILE_MIN_POSITIVE || neg < PROFILE_MIN_NEGATIVE {
                return Err(ElmError::data(format!(
                    "{} has {pos} positive and {neg} negative ratings; profiles need \
                     {PROFILE_MIN_POSITIVE} and {PROFILE_MIN_NEGATIVE}",
                    user.id
                )));
            }
            Ok(profile(&user.prefs))
        }
        _ => Err(mismatch()),
    }
}

/// Text whose encoding is an item's semantic embedding: its summary followed
/// by its positive review.
pub fn item_semantic_source(item: &Item) -> String {
    format!("{} {}", summary(&item.attrs), review(&item.attrs, true))
}

/// Ground-truth profile text of a user regardless of rating counts.
pub fn user_profile_text(user: &User) -> String {
    profile(&user.prefs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::tasks::default_task_specs;
    use std::collections::HashSet;

    fn item(attrs: Vec<f64>) -> Item {
        Item {
            id: "item_0000".into(),
            name: "x".into(),
            attrs,
        }
    }

    fn spec(kind: TaskKind) -> TaskSpec {
        default_task_specs()
            .into_iter()
            .find(|s| s.kind == kind)
            .unwrap()
    }

    #[test]
    fn high_bucket_phrase_appears() {
        let it = item(vec![0.9, 0.1, 0.5, 0.5, 0.5]);
        let t = render_task_text(&spec(TaskKind::Summary), &Subject::Item(&it)).unwrap();
        assert!(t.starts_with("hilarious ; gentle ; tender"), "{t}");
    }

    #[test]
    fn bucket_boundaries_are_half_open() {
        assert_eq!(bucket(0.0), Bucket::Low);
        assert_eq!(bucket(1.0 / 3.0), Bucket::Mid);
        assert_eq!(bucket(2.0 / 3.0), Bucket::High);
        assert_eq!(bucket(2.0 / 3.0 - 1e-12), Bucket::Mid);
        assert_eq!(bucket(1.0), Bucket::High);
    }

    #[test]
    fn rendering_is_deterministic_and_canonical() {
        let it = item(vec![0.2, 0.7, 0.4, 0.9, 0.1, 0.6, 0.3, 0.8]);
        for s in default_task_specs() {
            let subject = match s.kind {
                TaskKind::Similarities | TaskKind::Interpolation => Subject::ItemPair(&it, &it),
                TaskKind::UserProfile => continue,
                _ => Subject::Item(&it),
            };
            let a = render_task_text(&s, &subject).unwrap();
            let b = render_task_text(&s, &subject).unwrap();
            assert_eq!(a, b);
            let canon: Vec<&str> = a.split_whitespace().collect();
            assert_eq!(canon.join(" "), a);
            assert_eq!(a.to_lowercase(), a);
        }
    }

    #[test]
    fn adjectives_are_unique() {
        let mut seen = HashSet::new();
        for k in 0..16 {
            for a in attribute_adjectives(k) {
                assert!(seen.insert(a.clone()), "duplicate adjective {a}");
            }
        }
    }

    #[test]
    fn profile_has_ten_bullets_and_needs_ratings() {
        let user = User {
            id: "user_0001".into(),
            prefs: vec![0.9, -0.8, 0.1, 0.4, -0.2, 0.0, 0.7, -0.6],
        };
        let enough: Vec<(usize, u8)> = (0..5)
            .map(|i| (i, 5))
            .chain((5..10).map(|i| (i, 1)))
            .collect();
        let s = spec(TaskKind::UserProfile);
        let t = render_task_text(
            &s,
            &Subject::User {
                user: &user,
                ratings: &enough,
            },
        )
        .unwrap();
        assert_eq!(t.matches("* ").count(), 10);
        assert!(t.starts_with("* hilarious ; * frantic ;"), "{t}");
        let few: Vec<(usize, u8)> = enough[..9].to_vec();
        assert!(matches!(
            render_task_text(
                &s,
                &Subject::User {
                    user: &user,
                    ratings: &few
                }
            ),
            Err(ElmError::Data(_))
        ));
    }

    #[test]
    fn similarities_and_interpolation() {
        let a = item(vec![0.9, 0.1, 0.5]);
        let b = item(vec![0.8, 0.9, 0.1]);
        let sim =
            render_task_text(&spec(TaskKind::Similarities), &Subject::ItemPair(&a, &b)).unwrap();
        assert_eq!(sim, "both : hilarious .");
        let mid =
            render_task_text(&spec(TaskKind::Interpolation), &Subject::ItemPair(&a, &b)).unwrap();
        assert_eq!(mid, "hilarious ; tense ; unromantic .");
    }
}
