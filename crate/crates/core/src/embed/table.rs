use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SpaceKind;
use crate::error::{ElmError, Result};

/// Tolerance on the unit-norm invariant of semantic rows.
const UNIT_TOL: f64 = 1e-6;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn l2_normalize(v: &mut [f64]) -> Result<()> {
    let n = dot(v, v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(ElmError::degenerate(
            "cannot normalize a zero or non-finite vector",
        ));
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    Ok(())
}

/// Id → vector table of one embedding space; rows kept sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub space: SpaceKind,
    pub dim: usize,
    pub metric: String,
    rows: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    space: SpaceKind,
    metric: String,
}

#[derive(Serialize, Deserialize)]
struct Row {
    id: String,
    space: SpaceKind,
    vec: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(space: SpaceKind, dim: usize, rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut rows = rows;
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(ElmError::format(format!(
                "duplicate embedding id {}",
                w[0].0
            )));
        }
        for (id, v) in &rows {
            if v.len() != dim {
                return Err(ElmError::format(format!(
                    "row {id} has dimension {} but table dimension is {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ElmError::format(format!("row {id} has non-finite entries")));
            }
            if space == SpaceKind::Semantic && (dot(v, v).sqrt() - 1.0).abs() > UNIT_TOL {
                return Err(ElmError::format(format!(
                    "semantic row {id} is not unit norm"
                )));
            }
        }
        let index = rows
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (id.clone(), i))
            .collect();
        Ok(EmbeddingTable {
            space,
            dim,
            metric: "cosine".to_string(),
            rows,
            index,
        })
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.rows[i].1.as_slice())
    }

    pub fn require(&self, id: &str) -> Result<&[f64]> {
        self.get(id)
            .ok_or_else(|| ElmError::data(format!("no {} embedding for id {id}", self.space)))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().map(|(id, _)| id.as_str())
    }

    pub fn rows(&self) -> &[(String, Vec<f64>)] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(
            &mut out,
            &Header {
                dim: self.dim,
                space: self.space,
                metric: self.metric.clone(),
            },
        )?;
        out.write_all(b"\n")?;
        for (id, v) in &self.rows {
            serde_json::to_writer(
                &mut out,
                &Row {
                    id: id.clone(),
                    space: self.space,
                    vec: v.clone(),
                },
            )?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)
                .map_err(|e| ElmError::format(format!("bad embedding header: {e}")))?,
            None => return Err(ElmError::format("empty embedding file")),
        };
        if header.metric != "cosine" {
            return Err(ElmError::format(format!(
                "unsupported metric {}",
                header.metric
            )));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(&line)
                .map_err(|e| ElmError::format(format!("embedding line {}: {e}", n + 2)))?;
            if row.space != header.space {
                return Err(ElmError::format(format!(
                    "row {} is {} but file is {}",
                    row.id, row.space, header.space
                )));
            }
            rows.push((row.id, row.vec));
        }
        Self::new(header.space, header.dim, rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Loads a table and checks its space kind and dimension.
    pub fn load_expecting(path: &Path, space: SpaceKind, dim: usize) -> Result<Self> {
        let t = Self::load(path)?;
        if t.space != space || t.dim != dim {
            return Err(ElmError::format(format!(
                "{} holds a {}-dim {} table, expected {dim}-dim {space}",
                path.display(),
                t.dim,
                t.space
            )));
        }
        Ok(t)
    }
}
