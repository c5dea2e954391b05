//! Stage-wise training of the model: base language-model pretraining,
//! adapter-only training, full fine-tuning, and the two-token experiment.

mod toy;

pub use toy::{toy_two_token, ToyMode, ToyReport};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ElmError, Result};
use crate::model::{
    Checkpoint, ElmConfig, ElmModel, Example, MixedSequence, Vocab, ADAPTER_PREFIX, DECODER_PREFIX,
    TOKEN_PREFIX,
};
use crate::nn::{adam_step, AdamHyper, AdamState};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Text-only pretraining of token embeddings and decoder.
    Base,
    /// Adapters only; token embeddings and decoder frozen.
    AdapterOnly,
    Full,
}

impl Stage {
    pub fn label(&self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::AdapterOnly => "stage1",
            Stage::Full => "stage2",
        }
    }

    pub fn number(&self) -> u8 {
        match self {
            Stage::Base => 0,
            Stage::AdapterOnly => 1,
            Stage::Full => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Held-out loss is evaluated every this many steps (0 disables).
    pub eval_every: u64,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(ElmError::config(format!(
                "{} needs steps >= 1 and batch_size >= 1",
                self.stage.label()
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ElmError::config("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub loss: f64,
    pub stage: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLine {
    pub step: u64,
    pub heldout_loss: f64,
    pub stage: u8,
}

/// Parameter-group digests around a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attestation {
    pub stage: u8,
    pub e0_before: String,
    pub e0_after: String,
    pub m0_before: String,
    pub m0_after: String,
    pub adapter_before: String,
    pub adapter_after: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub lines: Vec<LogLine>,
    pub evals: Vec<EvalLine>,
    pub attestations: Vec<Attestation>,
    /// Loss on a fixed training batch before and after each stage.
    pub probe_losses: Vec<(u8, f64, f64)>,
    /// Global step at which stage 2 began.
    pub boundary_step: Option<u64>,
}

impl TrainLog {
    pub fn stage_losses(&self, stage: Stage) -> Vec<f64> {
        self.lines
            .iter()
            .filter(|l| l.stage == stage.number())
            .map(|l| l.loss)
            .collect()
    }
}

/// Training examples grouped by task. Batches draw a task from the task
/// weights (uniform unless set), then an example of that task uniformly.
#[derive(Debug, Clone, Default)]
pub struct TaskPool {
    tasks: Vec<(String, Vec<Example>)>,
    weights: Vec<f64>,
}

impl TaskPool {
    pub fn new(examples: impl IntoIterator<Item = (String, Example)>) -> Result<Self> {
        let mut by: BTreeMap<String, Vec<Example>> = BTreeMap::new();
        for (task, ex) in examples {
            by.entry(task).or_default().push(ex);
        }
        if by.is_empty() {
            return Err(ElmError::config("no training examples"));
        }
        let tasks: Vec<_> = by.into_iter().collect();
        let weights = vec![1.0; tasks.len()];
        Ok(TaskPool { tasks, weights })
    }

    /// Replaces the uniform task distribution; unknown task names are a
    /// configuration error.
    pub fn set_weights(&mut self, weights: &BTreeMap<String, f64>) -> Result<()> {
        for name in weights.keys() {
            if !self.tasks.iter().any(|(t, _)| t == name) {
                return Err(ElmError::config(format!(
                    "task weight for unknown task {name}"
                )));
            }
        }
        self.weights = self
            .tasks
            .iter()
            .map(|(t, _)| weights.get(t).copied().unwrap_or(0.0))
            .collect();
        if !self.weights.iter().any(|&w| w > 0.0) || self.weights.iter().any(|w| *w < 0.0) {
            return Err(ElmError::config(
                "task weights must be nonnegative and not all zero",
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tasks.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample<'a>(&'a self, rng: &mut SplitMix64, n: usize) -> Vec<&'a Example> {
        (0..n)
            .map(|_| {
                let t = rng.categorical(&self.weights);
                let pool = &self.tasks[t].1;
                &pool[rng.below(pool.len())]
            })
            .collect()
    }
}

pub struct Packed {
    pub seqs: Vec<MixedSequence>,
    pub targets: Vec<usize>,
    pub mask: Vec<f32>,
}

pub fn pack(batch: &[&Example]) -> Packed {
    let mut p = Packed {
        seqs: Vec::with_capacity(batch.len()),
        targets: Vec::new(),
        mask: Vec::new(),
    };
    for ex in batch {
        p.seqs.push(ex.seq.clone());
        p.targets.extend_from_slice(&ex.targets);
        p.mask.extend(ex.mask.iter().map(|&m| m as f32));
    }
    p
}

/// Mask-weighted mean loss over `examples`, evaluated in chunks.
pub fn mean_loss(model: &ElmModel<f32>, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut weight = 0.0;
    for chunk in examples.chunks(64) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let p = pack(&refs);
        let w: f64 = p.mask.iter().map(|&m| f64::from(m)).sum();
        if w == 0.0 {
            continue;
        }
        total += model.loss(&p.seqs, &p.targets, &p.mask)? * w;
        weight += w;
    }
    if weight == 0.0 {
        return Err(ElmError::degenerate(
            "held-out set has no weighted positions",
        ));
    }
    Ok(total / weight)
}

fn batch_rng(cfg: &StageConfig, step: u64) -> SplitMix64 {
    SplitMix64::stream(cfg.seed, &format!("batch/{}/{step}", cfg.stage.label()))
}

fn freeze_for(model: &mut ElmModel<f32>, stage: Stage) {
    let params = model.params_mut();
    match stage {
        Stage::Base => params.train_only(&[TOKEN_PREFIX, DECODER_PREFIX]),
        Stage::AdapterOnly => params.train_only(&[ADAPTER_PREFIX]),
        Stage::Full => params.set_all_trainable(true),
    }
}

/// Runs steps `start..cfg.steps` of one stage. The batch of step `s` depends
/// only on `(seed, stage, s)`, so a run resumed from a checkpoint taken at
/// step `start` continues exactly like an uninterrupted one.
pub fn run_stage(
    model: &mut ElmModel<f32>,
    opt: &mut AdamState<f32>,
    pool: &TaskPool,
    held_out: &[Example],
    cfg: &StageConfig,
    start: u64,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.validate()?;
    freeze_for(model, cfg.stage);
    let hyper = AdamHyper::with_lr(cfg.lr);
    let stage = cfg.stage.number();
    for step in start..cfg.steps {
        let mut rng = batch_rng(cfg, step);
        let batch = pool.sample(&mut rng, cfg.batch_size);
        let p = pack(&batch);
        let (loss, grads) = model.loss_and_grads(&p.seqs, &p.targets, &p.mask)?;
        adam_step(model.params_mut(), &grads, opt, &hyper)?;
        log.lines.push(LogLine {
            step: step + 1,
            loss,
            stage,
        });
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && !held_out.is_empty() {
            log.evals.push(EvalLine {
                step: step + 1,
                heldout_loss: mean_loss(model, held_out)?,
                stage,
            });
        }
        if (step + 1) % 500 == 0 {
            log::info!("{} step {} loss {loss:.4}", cfg.stage.label(), step + 1);
        }
    }
    Ok(())
}

fn probe_batch(pool: &TaskPool, cfg: &StageConfig) -> Vec<Example> {
    let mut rng = SplitMix64::stream(cfg.seed, "probe-batch");
    pool.sample(&mut rng, cfg.batch_size.max(16))
        .into_iter()
        .cloned()
        .collect()
}

/// Stage 1: trains the adapters with token embeddings and decoder frozen,
/// attesting the freeze with parameter digests.
pub fn train_stage1(
    model: &mut ElmModel<f32>,
    pool: &TaskPool,
    held_out: &[Example],
    cfg: &StageConfig,
    log: &mut TrainLog,
) -> Result<AdamState<f32>> {
    if cfg.stage != Stage::AdapterOnly {
        return Err(ElmError::config("stage 1 requires stage = adapter_only"));
    }
    let probe = probe_batch(pool, cfg);
    let before = mean_loss(model, &probe)?;
    let digests = |m: &ElmModel<f32>| {
        let p = m.params();
        (
            p.digest_prefix(TOKEN_PREFIX),
            p.digest_prefix(DECODER_PREFIX),
            p.digest_prefix(ADAPTER_PREFIX),
        )
    };
    let (e0_before, m0_before, adapter_before) = digests(model);
    let mut opt = AdamState::new(model.params());
    run_stage(model, &mut opt, pool, held_out, cfg, 0, log)?;
    let (e0_after, m0_after, adapter_after) = digests(model);
    if e0_before != e0_after || m0_before != m0_after {
        return Err(ElmError::numeric("stage1", "frozen parameters changed"));
    }
    log.attestations.push(Attestation {
        stage: 1,
        e0_before,
        e0_after,
        m0_before,
        m0_after,
        adapter_before,
        adapter_after,
    });
    log.probe_losses
        .push((1, before, mean_loss(model, &probe)?));
    Ok(opt)
}

/// Stage 2: fine-tunes every parameter group, starting from a stage-1
/// checkpoint. `resume` continues an interrupted stage-2 run.
pub fn train_stage2(
    ck: &mut Checkpoint,
    pool: &TaskPool,
    held_out: &[Example],
    cfg: &StageConfig,
    log: &mut TrainLog,
) -> Result<()> {
    if cfg.stage != Stage::Full {
        return Err(ElmError::config("stage 2 requires stage = full"));
    }
    let (start, mut opt) = match ck.stage.as_str() {
        "stage1" => (0, AdamState::new(ck.model.params())),
        "stage2" if ck.step < cfg.steps => {
            let opt = ck.optimizer.clone().ok_or_else(|| {
                ElmError::format("stage-2 checkpoint without optimizer state cannot resume")
            })?;
            (ck.step, opt)
        }
        other => {
            return Err(ElmError::config(format!(
                "stage 2 needs a stage-1 checkpoint, got stage {other:?} at step {}",
                ck.step
            )))
        }
    };
    let probe = probe_batch(pool, cfg);
    let before = mean_loss(&ck.model, &probe)?;
    run_stage(&mut ck.model, &mut opt, pool, held_out, cfg, start, log)?;
    log.probe_losses
        .push((2, before, mean_loss(&ck.model, &probe)?));
    ck.stage = "stage2".into();
    ck.step = cfg.steps;
    ck.optimizer = Some(opt);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ElmConfig,
    pub vocab_cap: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Every `holdout_every`-th distinct text is held out.
    pub holdout_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub vocab_size: usize,
    pub uniform_loss: f64,
    pub heldout_before: f64,
    pub heldout_after: f64,
    pub log: TrainLog,
}

/// Trains a text-only base model on `corpus`. The vocabulary is built from
/// the whole corpus; `model.vocab_size` is replaced by its size.
pub fn pretrain_base(
    corpus: &[String],
    cfg: &PretrainConfig,
) -> Result<(Checkpoint, PretrainReport)> {
    let mut texts: Vec<&str> = corpus.iter().map(String::as_str).collect();
    texts.sort_unstable();
    texts.dedup();
    if texts.is_empty() {
        return Err(ElmError::config("pretraining corpus is empty"));
    }
    let vocab = Vocab::build(texts.iter().copied(), cfg.vocab_cap)?;
    let mut mcfg = cfg.model.clone();
    mcfg.vocab_size = vocab.len();
    let mut model = ElmModel::<f32>::init(mcfg, cfg.seed, None)?;
    let every = cfg.holdout_every.max(2);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, t) in texts.iter().enumerate() {
        let ex = Example::from_text(&vocab, t);
        if i % every == every - 1 {
            held.push(ex);
        } else {
            train.push(("text".to_string(), ex));
        }
    }
    if held.is_empty() {
        held = train.iter().map(|(_, e)| e.clone()).collect();
    }
    let pool = TaskPool::new(train)?;
    let stage = StageConfig {
        stage: Stage::Base,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed: cfg.seed,
        eval_every: 0,
    };
    let heldout_before = mean_loss(&model, &held)?;
    let mut log = TrainLog::default();
    let mut opt = AdamState::new(model.params());
    run_stage(&mut model, &mut opt, &pool, &held, &stage, 0, &mut log)?;
    let heldout_after = mean_loss(&model, &held)?;
    model.params_mut().set_all_trainable(true);
    let report = PretrainReport {
        vocab_size: vocab.len(),
        uniform_loss: (vocab.len() as f64).ln(),
        heldout_before,
        heldout_after,
        log,
    };
    let ck = Checkpoint {
        model,
        vocab,
        stage: Stage::Base.label().into(),
        seed: cfg.seed,
        step: cfg.steps,
        optimizer: None,
    };
    Ok((ck, report))
}
