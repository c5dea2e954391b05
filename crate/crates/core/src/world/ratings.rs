use std::io::{BufRead, Write};

use super::World;
use crate::error::{ElmError, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
}

/// Sparse ratings sorted by (user, item), at most one per pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ratings {
    pub entries: Vec<Rating>,
}

/// `clamp(round(3 + 2·tanh(p·(a − ½) + ε)), 1, 5)`; ties round away from zero.
pub fn rating_rule(prefs: &[f64], attrs: &[f64], noise: f64) -> u8 {
    let affinity: f64 = prefs.iter().zip(attrs).map(|(p, a)| p * (a - 0.5)).sum();
    let raw = (3.0 + 2.0 * (affinity + noise).tanh()).round();
    raw.clamp(1.0, 5.0) as u8
}

/// Each (user, item) pair is observed with probability `density`. Pairs are
/// visited user-major; the mask stream draws one uniform per pair and the
/// noise stream one normal per observed pair.
pub fn gen_ratings(world: &World, density: f64, sigma: f64) -> Result<Ratings> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(ElmError::config(format!(
            "rating density {density} outside (0, 1]"
        )));
    }
    if sigma < 0.0 {
        return Err(ElmError::config("rating noise must be nonnegative"));
    }
    let mut mask = SplitMix64::stream(world.seed, "ratings/mask");
    let mut noise = SplitMix64::stream(world.seed, "ratings/noise");
    let mut entries = Vec::new();
    for (u, user) in world.users.iter().enumerate() {
        for (i, item) in world.items.iter().enumerate() {
            if !mask.bernoulli(density) {
                continue;
            }
            let eps = sigma * noise.normal();
            entries.push(Rating {
                user: u,
                item: i,
                rating: rating_rule(&user.prefs, &item.attrs, eps),
            });
        }
    }
    Ok(Ratings { entries })
}

impl Ratings {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn by_user(&self, n_users: usize) -> Vec<Vec<(usize, u8)>> {
        let mut out = vec![Vec::new(); n_users];
        for r in &self.entries {
            out[r.user].push((r.item, r.rating));
        }
        out
    }

    pub fn by_item(&self, n_items: usize) -> Vec<Vec<(usize, u8)>> {
        let mut out = vec![Vec::new(); n_items];
        for r in &self.entries {
            out[r.item].push((r.user, r.rating));
        }
        out
    }

    pub fn get(&self, user: usize, item: usize) -> Option<u8> {
        self.entries
            .binary_search_by(|r| (r.user, r.item).cmp(&(user, item)))
            .ok()
            .map(|i| self.entries[i].rating)
    }

    pub fn histogram(&self) -> [usize; 5] {
        let mut h = [0; 5];
        for r in &self.entries {
            h[(r.rating - 1) as usize] += 1;
        }
        h
    }
}

pub fn write_ratings_csv<W: Write>(ratings: &Ratings, world: &World, mut out: W) -> Result<()> {
    writeln!(out, "user_id,item_id,rating")?;
    for r in &ratings.entries {
        writeln!(
            out,
            "{},{},{}",
            world.users[r.user].id, world.items[r.item].id, r.rating
        )?;
    }
    Ok(())
}

pub fn read_ratings_csv<R: BufRead>(world: &World, input: R) -> Result<Ratings> {
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == "user_id,item_id,rating" => {}
        _ => {
            return Err(ElmError::format(
                "ratings file must start with `user_id,item_id,rating`",
            ))
        }
    }
    let mut entries = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(ElmError::format(format!(
                "ratings line {}: expected 3 fields",
                n + 2
            )));
        }
        let user = world
            .user_index(f[0])
            .ok_or_else(|| ElmError::data(format!("unknown user id {}", f[0])))?;
        let item = world
            .item_index(f[1])
            .ok_or_else(|| ElmError::data(format!("unknown item id {}", f[1])))?;
        let rating: u8 = f[2]
            .trim()
            .parse()
            .ok()
            .filter(|r| (1..=5).contains(r))
            .ok_or_else(|| ElmError::format(format!("ratings line {}: bad rating", n + 2)))?;
        entries.push(Rating { user, item, rating });
    }
    entries.sort_by_key(|r| (r.user, r.item));
    if entries
        .windows(2)
        .any(|w| (w[0].user, w[0].item) == (w[1].user, w[1].item))
    {
        return Err(ElmError::data("duplicate (user, item) rating"));
    }
    Ok(Ratings { entries })
}
