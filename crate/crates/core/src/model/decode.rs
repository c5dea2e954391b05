use serde::{Deserialize, Serialize};

use super::elm::ElmModel;
use super::mixed::MixedSequence;
use super::vocab::{Vocab, BOS, EOS, PAD, UNK};
use crate::error::Result;
use crate::nn::Float;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    /// Sampling from `softmax(logits / tau)`; `tau <= 0` decodes greedily.
    Temperature {
        tau: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Generated ids, without the closing EOS.
    pub tokens: Vec<usize>,
    pub ended: bool,
}

fn never_emitted(id: usize) -> bool {
    id == PAD || id == BOS || id == UNK
}

/// Generates up to `max_len` tokens after `prompt`, stopping at EOS. The
/// budget is clipped so the sequence fits the context.
pub fn decode_tokens<T: Float>(
    model: &ElmModel<T>,
    prompt: &MixedSequence,
    max_len: usize,
    mode: DecodeMode,
) -> Result<Decoded> {
    let budget = max_len.min(model.config().context.saturating_sub(prompt.len()));
    let mut seq = prompt.clone();
    let mut rng = match mode {
        DecodeMode::Temperature { seed, .. } => Some(SplitMix64::stream(seed, "decode")),
        DecodeMode::Greedy => None,
    };
    let mut tokens = Vec::new();
    for _ in 0..budget {
        let logits = model.forward_logits(&seq)?;
        let last: Vec<f64> = logits
            .row(logits.rows() - 1)
            .iter()
            .map(|x| x.as_f64())
            .collect();
        let next = match (mode, rng.as_mut()) {
            (DecodeMode::Temperature { tau, .. }, Some(rng)) if tau > 0.0 => {
                let maxv = last
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !never_emitted(*i))
                    .map(|(_, &l)| l)
                    .fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = last
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| {
                        if never_emitted(i) {
                            0.0
                        } else {
                            ((l - maxv) / tau).exp()
                        }
                    })
                    .collect();
                rng.categorical(&w)
            }
            _ => argmax(&last),
        };
        if next == EOS {
            return Ok(Decoded {
                tokens,
                ended: true,
            });
        }
        tokens.push(next);
        seq.push_token(next);
    }
    Ok(Decoded {
        tokens,
        ended: false,
    })
}

/// Highest-scoring emittable id; ties go to the lowest id.
fn argmax(row: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &l) in row.iter().enumerate() {
        if !never_emitted(i) && l > row[best] {
            best = i;
        }
    }
    best
}

pub fn decode_text<T: Float>(
    model: &ElmModel<T>,
    vocab: &Vocab,
    prompt: &MixedSequence,
    max_len: usize,
    mode: DecodeMode,
) -> Result<String> {
    decode_tokens(model, prompt, max_len, mode).map(|d| vocab.decode(&d.tokens))
}
