use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{SemanticEncoderConfig, SpaceKind, WalsConfig};
use crate::error::{ElmError, Result};
use crate::model::{AdapterConfig, ElmConfig};
use crate::train::{Stage, StageConfig};
use crate::world::{PairPolicy, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatingsConfig {
    pub density: f64,
    pub sigma: f64,
}

impl Default for RatingsConfig {
    fn default() -> Self {
        RatingsConfig {
            density: 0.2,
            sigma: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksConfig {
    /// Share of items (and users) whose instances go to the training split.
    pub split: f64,
    /// Controls instance order only.
    pub seed: u64,
    pub pair_policy: PairPolicy,
    /// Task sampling weights by task id; empty means uniform.
    pub weights: BTreeMap<String, f64>,
    /// Task ids to build; empty means all default tasks.
    pub include: Vec<String>,
}

impl Default for TasksConfig {
    fn default() -> Self {
        TasksConfig {
            split: 0.5,
            seed: 7,
            pair_policy: PairPolicy::Random,
            weights: BTreeMap::new(),
            include: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub ff_hidden: usize,
    pub adapter_hidden: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            d_model: 64,
            layers: 2,
            heads: 4,
            context: 128,
            ff_hidden: 128,
            adapter_hidden: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub vocab_cap: usize,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            steps: 1500,
            batch_size: 32,
            lr: 3e-3,
            vocab_cap: 512,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub eval_every: u64,
}

impl StageSection {
    pub fn to_stage(&self, stage: Stage) -> StageConfig {
        StageConfig {
            stage,
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }
}

fn stage1_default() -> StageSection {
    StageSection {
        steps: 2000,
        batch_size: 32,
        lr: 1e-3,
        seed: 7,
        eval_every: 500,
    }
}

fn stage2_default() -> StageSection {
    StageSection {
        steps: 8000,
        batch_size: 32,
        lr: 1e-3,
        seed: 7,
        eval_every: 1000,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_len: usize,
    /// Candidates per behavioral-consistency ranking.
    pub candidates: usize,
    pub seed: u64,
    /// Held-out instances kept for the loss curve during training.
    pub heldout_cap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_len: 40,
            candidates: 20,
            seed: 7,
            heldout_cap: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub interp_pairs: usize,
    pub cav_users: usize,
    pub cav_alphas: Vec<f64>,
    pub cav_lambda: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            interp_pairs: 20,
            cav_users: 20,
            cav_alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0],
            cav_lambda: 1e-3,
        }
    }
}

/// Every setting of a pipeline run. Sections may be omitted from a config
/// file; missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    pub ratings: RatingsConfig,
    pub semantic: SemanticEncoderConfig,
    pub wals: WalsConfig,
    pub tasks: TasksConfig,
    pub model: ModelShape,
    pub pretrain: PretrainSection,
    pub stage1: StageSection,
    pub stage2: StageSection,
    pub eval: EvalConfig,
    pub reports: ReportConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            world: WorldConfig::default(),
            ratings: RatingsConfig::default(),
            semantic: SemanticEncoderConfig::default(),
            wals: WalsConfig::default(),
            tasks: TasksConfig::default(),
            model: ModelShape::default(),
            pretrain: PretrainSection::default(),
            stage1: stage1_default(),
            stage2: stage2_default(),
            eval: EvalConfig::default(),
            reports: ReportConfig::default(),
        }
    }
}

impl Default for StageSection {
    fn default() -> Self {
        stage1_default()
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| ElmError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratings.density > 0.0 && self.ratings.density <= 1.0) {
            return Err(ElmError::config("ratings.density must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.tasks.split) {
            return Err(ElmError::config("tasks.split must lie in [0, 1]"));
        }
        if self.wals.lambda <= 0.0 {
            return Err(ElmError::config("wals.lambda must be positive"));
        }
        self.stage1.to_stage(Stage::AdapterOnly).validate()?;
        self.stage2.to_stage(Stage::Full).validate()?;
        self.elm_config(4).validate()
    }

    /// Model configuration for a vocabulary of `vocab_size`.
    pub fn elm_config(&self, vocab_size: usize) -> ElmConfig {
        let m = &self.model;
        ElmConfig {
            vocab_size,
            d_model: m.d_model,
            layers: m.layers,
            heads: m.heads,
            context: m.context,
            ff_hidden: m.ff_hidden,
            adapter_hidden: m.adapter_hidden,
            adapters: vec![
                AdapterConfig {
                    space: SpaceKind::Semantic,
                    input_dim: self.semantic.dim,
                    output_dim: m.d_model,
                },
                AdapterConfig {
                    space: SpaceKind::Behavioral,
                    input_dim: self.wals.k,
                    output_dim: m.d_model,
                },
            ],
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
