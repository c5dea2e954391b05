//! End-to-end pipeline over a run directory: world, ratings, embeddings,
//! task files, base pretraining, two-stage training, evaluation and the
//! geometry reports. Every step records a manifest of its inputs and
//! outputs.

mod config;
mod eval;
mod reports;

pub use config::{
    EvalConfig, ModelShape, PipelineConfig, PretrainSection, RatingsConfig, ReportConfig,
    StageSection, TasksConfig,
};
pub use eval::{evaluate, summary_generalization, SummaryProbe};
pub use reports::{
    cav_sweep, interpolation_sweep, predicted_relevance, train_cavs, CavSweepLine, CavSweepSummary,
    InterpLine, InterpSummary, CAV_THRESHOLD,
};

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{wals_fit, EmbeddingTable, MfFactors, SemanticEncoder, SpaceKind};
use crate::error::{ElmError, Result};
use crate::geometry::Cav;
use crate::model::{Checkpoint, ElmModel, EmbeddingTables, Example, Vocab};
use crate::train::{
    mean_loss, pretrain_base, train_stage1, train_stage2, PretrainConfig, PretrainReport, Stage,
    TaskPool, TrainLog,
};
use crate::world::{
    default_task_specs, gen_ratings, gen_world, item_semantic_source, read_ratings_csv,
    read_task_file, write_ratings_csv, write_task_file, Ratings, Sentinel, TaskInstance, TaskSpec,
    World,
};

/// File layout of a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }
    pub fn world(&self) -> PathBuf {
        self.root.join("world.json")
    }
    pub fn ratings(&self) -> PathBuf {
        self.root.join("ratings.csv")
    }
    pub fn table(&self, space: SpaceKind) -> PathBuf {
        self.root.join("embeddings").join(format!("{space}.jsonl"))
    }
    pub fn tasks(&self) -> PathBuf {
        self.root.join("tasks")
    }
    pub fn task_file(&self, split: &str) -> PathBuf {
        self.tasks().join(format!("{split}.jsonl"))
    }
    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(stage.label())
    }
    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(name)
    }
    pub fn eval_report(&self, split: &str) -> PathBuf {
        self.root.join("eval").join(format!("{split}.jsonl"))
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
    pub fn cavs(&self) -> PathBuf {
        self.root.join("cavs.jsonl")
    }
    pub fn manifest(&self, step: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{step}.json"))
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| ElmError::format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// SHA-256 of a file, or of every file below a directory (relative paths
/// included, sorted).
pub fn content_hash(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            h.update(rel.to_string_lossy().as_bytes());
            h.update(fs::read(path.join(&rel))?);
        }
    } else {
        h.update(fs::read(path)?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("below root").to_path_buf());
        }
    }
    Ok(())
}

/// Provenance of one pipeline step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepManifest {
    pub step: String,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn write_manifest(
    dir: &RunDir,
    cfg: &PipelineConfig,
    step: &str,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let rel = |p: &PathBuf| -> String {
        p.strip_prefix(&dir.root)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let hash_all = |ps: &[PathBuf]| -> Result<BTreeMap<String, String>> {
        ps.iter().map(|p| Ok((rel(p), content_hash(p)?))).collect()
    };
    let m = StepManifest {
        step: step.to_string(),
        config_digest: cfg.digest(),
        inputs: hash_all(inputs)?,
        outputs: hash_all(outputs)?,
    };
    write_json(&dir.manifest(step), &m)?;
    fs::write(dir.root.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

pub fn step_gen_world(cfg: &PipelineConfig, dir: &RunDir) -> Result<World> {
    let world = gen_world(&cfg.world)?;
    fs::create_dir_all(&dir.root)?;
    fs::write(dir.world(), world.to_json()?)?;
    write_manifest(dir, cfg, "gen-world", &[], &[dir.world()])?;
    Ok(world)
}

pub fn step_ratings(cfg: &PipelineConfig, dir: &RunDir, world: &World) -> Result<Ratings> {
    let ratings = gen_ratings(world, cfg.ratings.density, cfg.ratings.sigma)?;
    write_ratings_csv(
        &ratings,
        world,
        BufWriter::new(fs::File::create(dir.ratings())?),
    )?;
    write_manifest(dir, cfg, "ratings", &[dir.world()], &[dir.ratings()])?;
    Ok(ratings)
}

pub fn step_world(cfg: &PipelineConfig, dir: &RunDir) -> Result<(World, Ratings)> {
    let world = step_gen_world(cfg, dir)?;
    let ratings = step_ratings(cfg, dir, &world)?;
    Ok((world, ratings))
}

pub fn load_world(dir: &RunDir) -> Result<(World, Ratings)> {
    let world = World::from_json(&fs::read(dir.world())?)?;
    let ratings = read_ratings_csv(
        &world,
        std::io::BufReader::new(fs::File::open(dir.ratings())?),
    )?;
    Ok((world, ratings))
}

/// Semantic item vectors from the encoder; behavioral user and item vectors
/// from WALS on the ratings, stored in one table.
pub fn build_embeddings(
    cfg: &PipelineConfig,
    world: &World,
    ratings: &Ratings,
) -> Result<(EmbeddingTable, EmbeddingTable, MfFactors)> {
    let encoder = SemanticEncoder::new(cfg.semantic)?;
    let sem_rows = world
        .items
        .iter()
        .map(|it| Ok((it.id.clone(), encoder.encode(&item_semantic_source(it))?)))
        .collect::<Result<Vec<_>>>()?;
    let semantic = EmbeddingTable::new(SpaceKind::Semantic, cfg.semantic.dim, sem_rows)?;
    let triples: Vec<(usize, usize, f64)> = ratings
        .entries
        .iter()
        .map(|r| (r.user, r.item, f64::from(r.rating)))
        .collect();
    let factors = wals_fit(world.users.len(), world.items.len(), &triples, &cfg.wals)?;
    let mut rows: Vec<(String, Vec<f64>)> = world
        .users
        .iter()
        .enumerate()
        .map(|(u, x)| (x.id.clone(), factors.user(u).to_vec()))
        .collect();
    rows.extend(
        world
            .items
            .iter()
            .enumerate()
            .map(|(i, x)| (x.id.clone(), factors.item(i).to_vec())),
    );
    let behavioral = EmbeddingTable::new(SpaceKind::Behavioral, cfg.wals.k, rows)?;
    Ok((semantic, behavioral, factors))
}

pub fn step_embed(
    cfg: &PipelineConfig,
    dir: &RunDir,
    world: &World,
    ratings: &Ratings,
) -> Result<EmbeddingTables> {
    let (semantic, behavioral, factors) = build_embeddings(cfg, world, ratings)?;
    fs::create_dir_all(dir.root.join("embeddings"))?;
    semantic.save(&dir.table(SpaceKind::Semantic))?;
    behavioral.save(&dir.table(SpaceKind::Behavioral))?;
    write_json(&dir.log("wals_objective.json"), &factors.objective)?;
    write_manifest(
        dir,
        cfg,
        "embed",
        &[dir.world(), dir.ratings()],
        &[
            dir.table(SpaceKind::Semantic),
            dir.table(SpaceKind::Behavioral),
        ],
    )?;
    Ok(EmbeddingTables::new([semantic, behavioral]))
}

pub fn load_tables(cfg: &PipelineConfig, dir: &RunDir) -> Result<EmbeddingTables> {
    Ok(EmbeddingTables::new([
        EmbeddingTable::load_expecting(
            &dir.table(SpaceKind::Semantic),
            SpaceKind::Semantic,
            cfg.semantic.dim,
        )?,
        EmbeddingTable::load_expecting(
            &dir.table(SpaceKind::Behavioral),
            SpaceKind::Behavioral,
            cfg.wals.k,
        )?,
    ]))
}

pub fn task_specs(cfg: &PipelineConfig) -> Result<Vec<TaskSpec>> {
    let all = default_task_specs();
    if cfg.tasks.include.is_empty() {
        return Ok(all);
    }
    cfg.tasks
        .include
        .iter()
        .map(|id| {
            all.iter()
                .find(|s| &s.id == id)
                .cloned()
                .ok_or_else(|| ElmError::config(format!("unknown task {id}")))
        })
        .collect()
}

pub fn step_tasks(
    cfg: &PipelineConfig,
    dir: &RunDir,
    world: &World,
    ratings: &Ratings,
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    let files = write_task_file(
        world,
        ratings,
        &task_specs(cfg)?,
        cfg.tasks.split,
        cfg.tasks.seed,
        cfg.tasks.pair_policy,
        &dir.tasks(),
    )?;
    write_jsonl(&dir.log("skipped_tasks.jsonl"), &files.split.skipped)?;
    write_manifest(
        dir,
        cfg,
        "tasks",
        &[dir.world(), dir.ratings()],
        &[files.train.clone(), files.test.clone()],
    )?;
    Ok((files.split.train, files.split.test))
}

pub fn load_tasks(dir: &RunDir, split: &str) -> Result<Vec<TaskInstance>> {
    read_task_file(&dir.task_file(split))
}

/// Prompt text with embedding slots removed.
fn prompt_words(input: &str) -> Result<String> {
    Ok(Sentinel::split(input)?
        .into_iter()
        .filter_map(|p| p.ok())
        .collect::<Vec<_>>()
        .join(" "))
}

/// Text-only corpus for the base model: training targets, prompt texts
/// without their slots, and the words "one" and "two".
pub fn base_corpus(train: &[TaskInstance]) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(2 * train.len() + 2);
    for inst in train {
        out.push(inst.target.clone());
        out.push(prompt_words(&inst.input)?);
    }
    out.push("one".into());
    out.push("two".into());
    Ok(out)
}

pub fn step_pretrain(
    cfg: &PipelineConfig,
    dir: &RunDir,
    train: &[TaskInstance],
) -> Result<(Checkpoint, PretrainReport)> {
    let pcfg = PretrainConfig {
        model: cfg.elm_config(4),
        vocab_cap: cfg.pretrain.vocab_cap,
        steps: cfg.pretrain.steps,
        batch_size: cfg.pretrain.batch_size,
        lr: cfg.pretrain.lr,
        seed: cfg.pretrain.seed,
        holdout_every: 10,
    };
    let (ck, report) = pretrain_base(&base_corpus(train)?, &pcfg)?;
    let path = dir.checkpoint(Stage::Base);
    ck.save(&path)?;
    write_jsonl(&dir.log("pretrain.jsonl"), &report.log.lines)?;
    write_json(
        &dir.log("pretrain_summary.json"),
        &serde_json::json!({
            "vocab_size": report.vocab_size,
            "uniform_loss": report.uniform_loss,
            "heldout_before": report.heldout_before,
            "heldout_after": report.heldout_after,
        }),
    )?;
    write_manifest(dir, cfg, "pretrain", &[dir.task_file("train")], &[path])?;
    Ok((ck, report))
}

pub fn examples(
    vocab: &Vocab,
    tables: &EmbeddingTables,
    instances: &[TaskInstance],
) -> Result<Vec<(String, Example)>> {
    instances
        .iter()
        .map(|i| Ok((i.task.clone(), Example::from_instance(vocab, tables, i)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageSummary {
    pub boundary_step: u64,
    pub heldout_after_stage1: f64,
    pub heldout_after_stage2: f64,
    pub probe_losses: Vec<(u8, f64, f64)>,
    pub attestations: Vec<crate::train::Attestation>,
    pub evals: Vec<crate::train::EvalLine>,
}

/// Stage 1 then stage 2 from the base checkpoint, writing both stage
/// checkpoints and a combined log whose stage-2 steps continue the
/// stage-1 count.
fn pools(
    cfg: &PipelineConfig,
    vocab: &Vocab,
    tables: &EmbeddingTables,
    train: &[TaskInstance],
    test: &[TaskInstance],
) -> Result<(TaskPool, Vec<Example>)> {
    let mut pool = TaskPool::new(examples(vocab, tables, train)?)?;
    if !cfg.tasks.weights.is_empty() {
        pool.set_weights(&cfg.tasks.weights)?;
    }
    let held = examples(vocab, tables, test)?
        .into_iter()
        .take(cfg.eval.heldout_cap)
        .map(|(_, e)| e)
        .collect();
    Ok((pool, held))
}

fn train_inputs(dir: &RunDir) -> Vec<PathBuf> {
    vec![
        dir.checkpoint(Stage::Base),
        dir.task_file("train"),
        dir.task_file("test"),
        dir.table(SpaceKind::Semantic),
        dir.table(SpaceKind::Behavioral),
    ]
}

/// Stage-2 log lines shifted so their steps continue the stage-1 count.
fn global_lines(log: &TrainLog, boundary: u64) -> Vec<crate::train::LogLine> {
    log.lines
        .iter()
        .map(|l| {
            let mut l = l.clone();
            if l.stage == Stage::Full.number() {
                l.step += boundary;
            }
            l
        })
        .collect()
}

/// Stage 1 then stage 2 from the base checkpoint, writing both stage
/// checkpoints and a combined log whose stage-2 steps continue the
/// stage-1 count.
pub fn run_two_stage(
    cfg: &PipelineConfig,
    dir: &RunDir,
    base: &Checkpoint,
    tables: &EmbeddingTables,
    train: &[TaskInstance],
    test: &[TaskInstance],
) -> Result<(Checkpoint, TwoStageSummary)> {
    if base.stage != Stage::Base.label() {
        return Err(ElmError::config(format!(
            "two-stage training starts from a base checkpoint, got {}",
            base.stage
        )));
    }
    let vocab = &base.vocab;
    let (pool, held) = pools(cfg, vocab, tables, train, test)?;
    let mut model = ElmModel::init(
        cfg.elm_config(vocab.len()),
        cfg.stage1.seed,
        Some(&base.model),
    )?;
    let mut log = TrainLog::default();
    let s1 = cfg.stage1.to_stage(Stage::AdapterOnly);
    train_stage1(&mut model, &pool, &held, &s1, &mut log)?;
    model.params_mut().set_all_trainable(true);
    let heldout_after_stage1 = mean_loss(&model, &held)?;
    let mut ck = Checkpoint {
        model,
        vocab: vocab.clone(),
        stage: Stage::AdapterOnly.label().into(),
        seed: cfg.stage1.seed,
        step: s1.steps,
        optimizer: None,
    };
    ck.save(&dir.checkpoint(Stage::AdapterOnly))?;
    log.boundary_step = Some(s1.steps);
    let s2 = cfg.stage2.to_stage(Stage::Full);
    train_stage2(&mut ck, &pool, &held, &s2, &mut log)?;
    ck.seed = cfg.stage2.seed;
    ck.model.params_mut().set_all_trainable(true);
    let heldout_after_stage2 = mean_loss(&ck.model, &held)?;
    ck.save(&dir.checkpoint(Stage::Full))?;
    write_jsonl(&dir.log("train.jsonl"), global_lines(&log, s1.steps))?;
    let summary = TwoStageSummary {
        boundary_step: s1.steps,
        heldout_after_stage1,
        heldout_after_stage2,
        probe_losses: log.probe_losses.clone(),
        attestations: log.attestations.clone(),
        evals: log.evals.clone(),
    };
    write_json(&dir.log("train_summary.json"), &summary)?;
    write_manifest(
        dir,
        cfg,
        "train",
        &train_inputs(dir),
        &[
            dir.checkpoint(Stage::AdapterOnly),
            dir.checkpoint(Stage::Full),
        ],
    )?;
    Ok((ck, summary))
}

/// Continues an interrupted stage-2 run from `checkpoints/stage2` up to
/// `stage2.steps`, appending to the training log.
pub fn resume_stage2(
    cfg: &PipelineConfig,
    dir: &RunDir,
    tables: &EmbeddingTables,
    train: &[TaskInstance],
    test: &[TaskInstance],
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::load(&dir.checkpoint(Stage::Full))?;
    let (pool, held) = pools(cfg, &ck.vocab, tables, train, test)?;
    let mut log = TrainLog::default();
    train_stage2(
        &mut ck,
        &pool,
        &held,
        &cfg.stage2.to_stage(Stage::Full),
        &mut log,
    )?;
    ck.model.params_mut().set_all_trainable(true);
    ck.save(&dir.checkpoint(Stage::Full))?;
    let mut lines: Vec<crate::train::LogLine> = if dir.log("train.jsonl").exists() {
        read_jsonl(&dir.log("train.jsonl"))?
    } else {
        Vec::new()
    };
    lines.extend(global_lines(&log, cfg.stage1.steps));
    write_jsonl(&dir.log("train.jsonl"), lines)?;
    write_manifest(
        dir,
        cfg,
        "train",
        &train_inputs(dir),
        &[dir.checkpoint(Stage::Full)],
    )?;
    Ok(ck)
}

/// Everything evaluation and serving read from a run directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub config: PipelineConfig,
    pub world: World,
    pub ratings: Ratings,
    pub tables: EmbeddingTables,
    pub encoder: SemanticEncoder,
    pub checkpoint: Checkpoint,
}

impl Artifacts {
    pub fn load(cfg: &PipelineConfig, dir: &RunDir, checkpoint: &Path) -> Result<Self> {
        let (world, ratings) = load_world(dir)?;
        Ok(Artifacts {
            config: cfg.clone(),
            world,
            ratings,
            tables: load_tables(cfg, dir)?,
            encoder: SemanticEncoder::new(cfg.semantic)?,
            checkpoint: Checkpoint::load(checkpoint)?,
        })
    }

    pub fn semantic(&self) -> &EmbeddingTable {
        self.tables
            .get(SpaceKind::Semantic)
            .expect("semantic table loaded")
    }

    pub fn behavioral(&self) -> &EmbeddingTable {
        self.tables
            .get(SpaceKind::Behavioral)
            .expect("behavioral table loaded")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub pretrain_heldout: f64,
    pub uniform_loss: f64,
    pub two_stage: TwoStageSummary,
    pub summary_probe: SummaryProbe,
    pub interpolation: InterpSummary,
    pub cav: CavSweepSummary,
}

/// Runs every step in order into `dir`.
pub fn run_all(cfg: &PipelineConfig, dir: &RunDir) -> Result<RunSummary> {
    cfg.validate()?;
    let (world, ratings) = step_world(cfg, dir)?;
    let tables = step_embed(cfg, dir, &world, &ratings)?;
    let (train, test) = step_tasks(cfg, dir, &world, &ratings)?;
    let (base, pre) = step_pretrain(cfg, dir, &train)?;
    let (ck, two_stage) = run_two_stage(cfg, dir, &base, &tables, &train, &test)?;
    let art = Artifacts {
        config: cfg.clone(),
        world,
        ratings,
        tables,
        encoder: SemanticEncoder::new(cfg.semantic)?,
        checkpoint: ck,
    };
    let report = evaluate(&art, &test)?;
    write_jsonl(&dir.eval_report("test"), &report)?;
    let summary_probe = summary_generalization(&art, &report)?;
    write_json(&dir.report("summary_probe.json"), &summary_probe)?;
    let cavs: Vec<Cav> = train_cavs(&art.world, &art.tables, cfg.reports.cav_lambda)?;
    write_jsonl(&dir.cavs(), &cavs)?;
    let (interp_lines, interpolation) = interpolation_sweep(&art)?;
    write_jsonl(&dir.report("interpolation_sweep.jsonl"), &interp_lines)?;
    write_json(&dir.report("interpolation_summary.json"), &interpolation)?;
    let (cav_lines, cav) = cav_sweep(&art, &cavs)?;
    write_jsonl(&dir.report("cav_sweep.jsonl"), &cav_lines)?;
    write_json(&dir.report("cav_summary.json"), &cav)?;
    write_manifest(
        dir,
        cfg,
        "eval",
        &[dir.checkpoint(Stage::Full), dir.task_file("test")],
        &[
            dir.eval_report("test"),
            dir.cavs(),
            dir.root.join("reports"),
        ],
    )?;
    Ok(RunSummary {
        pretrain_heldout: pre.heldout_after,
        uniform_loss: pre.uniform_loss,
        two_stage,
        summary_probe,
        interpolation,
        cav,
    })
}
