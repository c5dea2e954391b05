use serde::{Deserialize, Serialize};

use super::{run_stage, Stage, StageConfig, TaskPool, TrainLog};
use crate::embed::SpaceKind;
use crate::error::{ElmError, Result};
use crate::model::{
    decode_text, AdapterConfig, Checkpoint, DecodeMode, ElmModel, Example, MixedSequence, BOS,
};
use crate::nn::AdamState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyMode {
    /// Adapter-only training first, then a short full fine-tune.
    TwoStage,
    /// Every parameter trained from the first step.
    SingleStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub mode: ToyMode,
    pub initial_accuracy: f64,
    pub accuracy: f64,
    /// First evaluated step with both cases decoded exactly.
    pub steps_to_converge: Option<u64>,
    /// Final decodes for `[1, 0]` and `[0, 1]`.
    pub outputs: [String; 2],
    /// Both inputs decode to the same text.
    pub collapsed: bool,
    pub log: TrainLog,
}

const CASES: [([f64; 2], &str); 2] = [([1.0, 0.0], "one"), ([0.0, 1.0], "two")];
const EVAL_EVERY: u64 = 10;

fn prompt(w: [f64; 2]) -> MixedSequence {
    let mut s = MixedSequence::tokens(&[BOS]);
    s.push_embed(w.to_vec(), SpaceKind::Behavioral);
    s
}

fn outputs(model: &ElmModel<f32>, base: &Checkpoint) -> Result<[String; 2]> {
    let a = decode_text(
        model,
        &base.vocab,
        &prompt(CASES[0].0),
        2,
        DecodeMode::Greedy,
    )?;
    let b = decode_text(
        model,
        &base.vocab,
        &prompt(CASES[1].0),
        2,
        DecodeMode::Greedy,
    )?;
    Ok([a, b])
}

fn accuracy(out: &[String; 2]) -> f64 {
    out.iter()
        .zip(CASES)
        .filter(|(o, c)| o.as_str() == c.1)
        .count() as f64
        / 2.0
}

/// Teaches a fresh 2-d adapter on top of `base` to map `[1, 0]` to "one"
/// and `[0, 1]` to "two" with no text prompt. `budget` bounds the steps of
/// the first (or only) stage; accuracy is checked every 10 steps and the
/// run stops once both cases decode exactly.
pub fn toy_two_token(
    base: &Checkpoint,
    mode: ToyMode,
    budget: u64,
    seed: u64,
) -> Result<ToyReport> {
    for (_, word) in CASES {
        if base.vocab.id(word).is_none() {
            return Err(ElmError::config(format!("base vocabulary lacks {word:?}")));
        }
    }
    let mut cfg = base.model.config().clone();
    cfg.adapters = vec![AdapterConfig {
        space: SpaceKind::Behavioral,
        input_dim: 2,
        output_dim: cfg.d_model,
    }];
    let mut model = ElmModel::init(cfg, seed, Some(&base.model))?;
    let examples = CASES.iter().flat_map(|(w, word)| {
        let ex = Example::from_prompt(prompt(*w), &base.vocab.encode(word));
        std::iter::repeat_n((word.to_string(), ex), 4)
    });
    let pool = TaskPool::new(examples)?;
    let initial_accuracy = accuracy(&outputs(&model, base)?);
    let (stage, lr) = match mode {
        ToyMode::TwoStage => (Stage::AdapterOnly, 1e-3),
        ToyMode::SingleStage => (Stage::Full, 1e-3),
    };
    let mut log = TrainLog::default();
    let mut opt = AdamState::new(model.params());
    let mut steps_to_converge = None;
    let mut done = 0;
    while done < budget {
        let next = (done + EVAL_EVERY).min(budget);
        let stage_cfg = StageConfig {
            stage,
            steps: next,
            batch_size: 8,
            lr,
            seed,
            eval_every: 0,
        };
        run_stage(&mut model, &mut opt, &pool, &[], &stage_cfg, done, &mut log)?;
        done = next;
        if accuracy(&outputs(&model, base)?) == 1.0 {
            steps_to_converge = Some(done);
            break;
        }
    }
    if mode == ToyMode::TwoStage && steps_to_converge.is_some() {
        // Brief full fine-tune on top of the converged adapter.
        let full = StageConfig {
            stage: Stage::Full,
            steps: 20,
            batch_size: 8,
            lr: 1e-4,
            seed,
            eval_every: 0,
        };
        let mut opt = AdamState::new(model.params());
        run_stage(&mut model, &mut opt, &pool, &[], &full, 0, &mut log)?;
    }
    let out = outputs(&model, base)?;
    Ok(ToyReport {
        mode,
        initial_accuracy,
        accuracy: accuracy(&out),
        steps_to_converge,
        collapsed: out[0] == out[1],
        outputs: out,
        log,
    })
}
