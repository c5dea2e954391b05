use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::elm::{ElmConfig, ElmModel};
use super::vocab::Vocab;
use crate::error::{ElmError, Result};
use crate::nn::{AdamState, Float, ParamSet, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const VOCAB: &str = "vocab.json";
pub const OPTIMIZER: &str = "optimizer.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub stage: String,
    pub seed: u64,
    /// Optimizer steps taken in `stage`.
    pub step: u64,
    pub dtype: String,
    pub config: ElmConfig,
    pub params: Vec<ParamEntry>,
    pub params_sha256: String,
}

const FORMAT: &str = "elm-checkpoint/1";

/// A model with its vocabulary and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ElmModel<f32>,
    pub vocab: Vocab,
    pub stage: String,
    pub seed: u64,
    pub step: u64,
    pub optimizer: Option<AdamState<f32>>,
}

fn le_bytes<'a>(tensors: impl Iterator<Item = &'a Tensor<f32>>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn read_f32s(bytes: &[u8], shapes: &[Vec<usize>], what: &str) -> Result<Vec<Tensor<f32>>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != total * 4 {
        return Err(ElmError::format(format!(
            "{what} holds {} bytes, manifest implies {}",
            bytes.len(),
            total * 4
        )));
    }
    let mut vals = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    shapes
        .iter()
        .map(|s| Tensor::from_vec(s, vals.by_ref().take(s.iter().product()).collect()))
        .collect()
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        if self.model.config().vocab_size != self.vocab.len() {
            return Err(ElmError::config("model vocab size differs from vocabulary"));
        }
        let params = self.model.params();
        let bytes = le_bytes(params.iter().map(|p| &p.value));
        let manifest = Manifest {
            format: FORMAT.into(),
            stage: self.stage.clone(),
            seed: self.seed,
            step: self.step,
            dtype: "f32".into(),
            config: self.model.config().clone(),
            params: params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            params_sha256: hex::encode(Sha256::digest(&bytes)),
        };
        fs::write(dir.join(PARAMS), &bytes)?;
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join(VOCAB), serde_json::to_vec(&self.vocab)?)?;
        let opt_path = dir.join(OPTIMIZER);
        match &self.optimizer {
            Some(state) => {
                let mut out = state.step.to_le_bytes().to_vec();
                out.extend(le_bytes(state.m.iter().chain(&state.v)));
                fs::write(opt_path, out)?;
            }
            None if opt_path.exists() => fs::remove_file(opt_path)?,
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        if manifest.format != FORMAT || manifest.dtype != "f32" {
            return Err(ElmError::format(format!(
                "unsupported checkpoint {} / {}",
                manifest.format, manifest.dtype
            )));
        }
        let bytes = fs::read(dir.join(PARAMS))?;
        if hex::encode(Sha256::digest(&bytes)) != manifest.params_sha256 {
            return Err(ElmError::format(
                "params.bin does not match its manifest digest",
            ));
        }
        let shapes: Vec<Vec<usize>> = manifest.params.iter().map(|p| p.shape.clone()).collect();
        let mut params = ParamSet::new();
        for (entry, t) in manifest
            .params
            .iter()
            .zip(read_f32s(&bytes, &shapes, PARAMS)?)
        {
            params.push(entry.name.clone(), t)?;
        }
        let model = ElmModel::from_parts(manifest.config, params)?;
        let vocab: Vocab = serde_json::from_slice(&fs::read(dir.join(VOCAB))?)?;
        if vocab.len() != model.config().vocab_size {
            return Err(ElmError::format("vocab.json size differs from the model"));
        }
        let opt_path = dir.join(OPTIMIZER);
        let optimizer = if opt_path.exists() {
            let raw = fs::read(opt_path)?;
            if raw.len() < 8 {
                return Err(ElmError::format("truncated optimizer.bin"));
            }
            let step = u64::from_le_bytes(raw[..8].try_into().expect("8 bytes"));
            let both: Vec<Vec<usize>> = shapes.iter().chain(&shapes).cloned().collect();
            let mut ts = read_f32s(&raw[8..], &both, OPTIMIZER)?;
            let v = ts.split_off(shapes.len());
            Some(AdamState { step, m: ts, v })
        } else {
            None
        };
        Ok(Checkpoint {
            model,
            vocab,
            stage: manifest.stage,
            seed: manifest.seed,
            step: manifest.step,
            optimizer,
        })
    }
}

/// SHA-256 of every file of a checkpoint directory, by file name.
pub fn checkpoint_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [MANIFEST, PARAMS, VOCAB, OPTIMIZER] {
        let p = dir.join(name);
        if p.exists() {
            h.update(name.as_bytes());
            h.update(fs::read(p)?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

impl<T: Float> ElmModel<T> {
    pub fn to_f32(&self) -> ElmModel<f32> {
        self.cast()
    }
}
