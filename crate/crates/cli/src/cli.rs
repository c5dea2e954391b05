//! Argument parsing and subcommand dispatch.

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use elm_core::embed::SpaceKind;
use elm_core::error::{ElmError, Result};
use elm_core::geometry::Cav;
use elm_core::model::{build_prompt, DecodeMode, EOS};
use elm_core::pipeline::{
    self, cav_sweep, evaluate, interpolation_sweep, load_tables, load_tasks, load_world,
    read_jsonl, summary_generalization, train_cavs, write_json, write_jsonl, write_manifest,
    Artifacts, PipelineConfig, RunDir,
};
use elm_core::rlaif::{
    consistency_reward, exact_soft_policy, objective, per_step_kl, reinforce_kl_finetune, Comdp,
    ElmPolicy, ReinforceConfig, RewardMode,
};
use elm_core::service::{DecodeRequest, EmbeddingSpec, Explorer};
use elm_core::train::Stage;
use elm_core::world::PairPolicy;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "elm", version, about = "Embedding language model pipeline")]
pub struct Cli {
    /// TOML config. Without it, the run directory's config.toml is used if
    /// present, else defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding every artifact of a run.
    #[arg(long, global = true, default_value = "run")]
    pub run_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate items, users and attributes.
    GenWorld(GenWorldArgs),
    /// Sample sparse ratings for the world.
    Ratings(RatingsArgs),
    /// Build the semantic and behavioral embedding tables.
    Embed(EmbedArgs),
    /// Build train and test task files.
    Tasks(TasksArgs),
    /// Pretrain the text-only base model.
    Pretrain(PretrainArgs),
    /// Two-stage training from the base checkpoint.
    Train(TrainArgs),
    /// Decode a split and score it.
    Eval(EvalArgs),
    /// Interpolation and CAV probes.
    Geom {
        #[command(subcommand)]
        command: GeomCommand,
    },
    /// KL-regularized REINFORCE on a tiny action set.
    Rlaif(RlaifArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Every step from world generation to the reports.
    Run,
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub attrs: Option<usize>,
    #[arg(long)]
    pub attr_mean: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RatingsArgs {
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// WALS rank.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sweeps: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PairArg {
    Random,
    Nearest,
}

#[derive(Debug, Args)]
pub struct TasksArgs {
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub pair_policy: Option<PairArg>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub stage1_steps: Option<u64>,
    #[arg(long)]
    pub stage2_steps: Option<u64>,
    /// Continue an interrupted stage-2 checkpoint instead of starting over.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Comma-separated subset of sc,bc.
    #[arg(long, default_value = "sc,bc")]
    pub metrics: String,
    /// Checkpoint directory; defaults to the stage-2 checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum GeomCommand {
    /// Decode a mixture of two entities.
    Interpolate {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value = "summary")]
        task: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode an entity shifted along a CAV.
    Cav {
        #[arg(long)]
        base: String,
        #[arg(long)]
        attr: String,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value = "summary")]
        task: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train CAVs for every attribute into cavs.jsonl.
    TrainCavs,
    /// Interpolation and CAV sweep reports.
    Sweeps {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RlaifArgs {
    /// Item whose semantic vector is the prompt and the reward source;
    /// defaults to the first held-out item.
    #[arg(long)]
    pub item: Option<String>,
    /// Comma-separated words forming the action set together with EOS;
    /// defaults to the two words whose one-word texts score highest.
    #[arg(long)]
    pub words: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub horizon: usize,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 5000)]
    pub steps: u64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Config file, else the run directory's saved config, else defaults.
pub fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let saved = cli.run_dir.join("config.toml");
    let path = cli
        .config
        .clone()
        .or_else(|| saved.exists().then_some(saved));
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| ElmError::config(format!("{}: {e}", p.display())))?;
            PipelineConfig::from_toml(&text)
        }
        None => Ok(PipelineConfig::default()),
    }
}

fn checkpoint_path(dir: &RunDir, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| dir.checkpoint(Stage::Full))
}

fn print(value: serde_json::Value) {
    println!("{value}");
}

/// Runs one parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let dir = RunDir::new(&cli.run_dir);
    match cli.command {
        Command::GenWorld(a) => {
            set(&mut cfg.world.seed, a.seed);
            set(&mut cfg.world.n_items, a.items);
            set(&mut cfg.world.n_users, a.users);
            set(&mut cfg.world.n_attrs, a.attrs);
            set(&mut cfg.world.attr_mean, a.attr_mean);
            cfg.validate()?;
            let w = pipeline::step_gen_world(&cfg, &dir)?;
            print(
                json!({"world": dir.world(), "items": w.items.len(), "users": w.users.len(),
                "sha256": pipeline::content_hash(&dir.world())?}),
            );
        }
        Command::Ratings(a) => {
            set(&mut cfg.ratings.density, a.density);
            set(&mut cfg.ratings.sigma, a.sigma);
            cfg.validate()?;
            let world = elm_core::world::World::from_json(&std::fs::read(dir.world())?)?;
            let r = pipeline::step_ratings(&cfg, &dir, &world)?;
            print(json!({"ratings": dir.ratings(), "count": r.len(), "histogram": r.histogram()}));
        }
        Command::Embed(a) => {
            set(&mut cfg.wals.k, a.k);
            set(&mut cfg.wals.lambda, a.lambda);
            set(&mut cfg.wals.sweeps, a.sweeps);
            cfg.validate()?;
            let (world, ratings) = load_world(&dir)?;
            let tables = pipeline::step_embed(&cfg, &dir, &world, &ratings)?;
            let rows = |s| tables.get(s).map_or(0, |t| t.len());
            print(
                json!({"semantic_rows": rows(SpaceKind::Semantic), "behavioral_rows": rows(SpaceKind::Behavioral)}),
            );
        }
        Command::Tasks(a) => {
            set(&mut cfg.tasks.split, a.split);
            set(&mut cfg.tasks.seed, a.seed);
            if let Some(p) = a.pair_policy {
                cfg.tasks.pair_policy = match p {
                    PairArg::Random => PairPolicy::Random,
                    PairArg::Nearest => PairPolicy::Nearest,
                };
            }
            cfg.validate()?;
            let (world, ratings) = load_world(&dir)?;
            let (train, test) = pipeline::step_tasks(&cfg, &dir, &world, &ratings)?;
            print(json!({"train": train.len(), "test": test.len()}));
        }
        Command::Pretrain(a) => {
            set(&mut cfg.pretrain.steps, a.steps);
            set(&mut cfg.pretrain.lr, a.lr);
            set(&mut cfg.pretrain.batch_size, a.batch);
            cfg.validate()?;
            let train = load_tasks(&dir, "train")?;
            let (_, rep) = pipeline::step_pretrain(&cfg, &dir, &train)?;
            print(
                json!({"vocab_size": rep.vocab_size, "heldout_before": rep.heldout_before,
                "heldout_after": rep.heldout_after, "uniform_loss": rep.uniform_loss}),
            );
        }
        Command::Train(a) => {
            set(&mut cfg.stage1.steps, a.stage1_steps);
            set(&mut cfg.stage2.steps, a.stage2_steps);
            cfg.validate()?;
            let tables = load_tables(&cfg, &dir)?;
            let train = load_tasks(&dir, "train")?;
            let test = load_tasks(&dir, "test")?;
            if a.resume {
                let ck = pipeline::resume_stage2(&cfg, &dir, &tables, &train, &test)?;
                print(json!({"stage": ck.stage, "step": ck.step}));
            } else {
                let base = elm_core::model::Checkpoint::load(&dir.checkpoint(Stage::Base))?;
                let (ck, s) = pipeline::run_two_stage(&cfg, &dir, &base, &tables, &train, &test)?;
                print(
                    json!({"stage": ck.stage, "step": ck.step, "boundary_step": s.boundary_step,
                    "heldout_after_stage1": s.heldout_after_stage1,
                    "heldout_after_stage2": s.heldout_after_stage2}),
                );
            }
        }
        Command::Eval(a) => eval(&cfg, &dir, a)?,
        Command::Geom { command } => geom(&cfg, &dir, command)?,
        Command::Rlaif(a) => rlaif(&cfg, &dir, a)?,
        Command::Serve(a) => {
            let explorer = Arc::new(Explorer::load(
                &cfg,
                &dir,
                &checkpoint_path(&dir, &a.checkpoint),
            )?);
            let addr: std::net::SocketAddr = format!("{}:{}", a.bind, a.port)
                .parse()
                .map_err(|e| ElmError::config(format!("bad address: {e}")))?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::server::serve(explorer, addr))?;
        }
        Command::Run => {
            let s = pipeline::run_all(&cfg, &dir)?;
            print(serde_json::to_value(&s)?);
        }
    }
    Ok(())
}

fn eval(cfg: &PipelineConfig, dir: &RunDir, a: EvalArgs) -> Result<()> {
    let metrics: Vec<&str> = a
        .metrics
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .collect();
    if let Some(bad) = metrics.iter().find(|m| !matches!(**m, "sc" | "bc")) {
        return Err(ElmError::config(format!(
            "unknown metric {bad}; use sc and/or bc"
        )));
    }
    let ck = checkpoint_path(dir, &a.checkpoint);
    let art = Artifacts::load(cfg, dir, &ck)?;
    let instances = load_tasks(dir, a.split.name())?;
    let mut report = evaluate(&art, &instances)?;
    for r in &mut report {
        if !metrics.contains(&"sc") {
            r.sc = None;
        }
        if !metrics.contains(&"bc") {
            r.bc_spearman = None;
            r.bc_ndcg = None;
            r.candidates = None;
        }
    }
    let out = dir.eval_report(a.split.name());
    write_jsonl(&out, &report)?;
    let mut outputs = vec![out.clone()];
    let mut summary = json!({"report": out, "lines": report.len()});
    if metrics.contains(&"sc") && report.iter().filter(|r| r.task == "summary").count() >= 2 {
        let probe = summary_generalization(&art, &report)?;
        let path = dir.report(&format!("summary_probe_{}.json", a.split.name()));
        write_json(&path, &probe)?;
        outputs.push(path);
        summary["summary_probe"] = serde_json::to_value(&probe)?;
    }
    write_manifest(
        dir,
        cfg,
        &format!("eval-{}", a.split.name()),
        &[ck, dir.task_file(a.split.name())],
        &outputs,
    )?;
    print(summary);
    Ok(())
}

fn load_cavs(dir: &RunDir) -> Result<Vec<Cav>> {
    if dir.cavs().exists() {
        read_jsonl(&dir.cavs())
    } else {
        Err(ElmError::data(format!(
            "{} not found; run `geom train-cavs` first",
            dir.cavs().display()
        )))
    }
}

fn geom(cfg: &PipelineConfig, dir: &RunDir, command: GeomCommand) -> Result<()> {
    match command {
        GeomCommand::Interpolate {
            a,
            b,
            alpha,
            task,
            checkpoint,
        } => {
            let explorer = Explorer::new(
                Artifacts::load(cfg, dir, &checkpoint_path(dir, &checkpoint))?,
                Vec::new(),
            )?;
            let resp = explorer.decode(&DecodeRequest {
                task,
                embedding: EmbeddingSpec::interpolate(&a, &b, alpha),
                second: None,
                mode: DecodeMode::Greedy,
            })?;
            print(serde_json::to_value(&resp)?);
        }
        GeomCommand::Cav {
            base,
            attr,
            alpha,
            task,
            checkpoint,
        } => {
            let art = Artifacts::load(cfg, dir, &checkpoint_path(dir, &checkpoint))?;
            let explorer = Explorer::new(art, load_cavs(dir)?)?;
            let resp = explorer.decode(&DecodeRequest {
                task,
                embedding: EmbeddingSpec::cav(&base, &attr, alpha),
                second: None,
                mode: DecodeMode::Greedy,
            })?;
            print(serde_json::to_value(&resp)?);
        }
        GeomCommand::TrainCavs => {
            let (world, _) = load_world(dir)?;
            let cavs = train_cavs(&world, &load_tables(cfg, dir)?, cfg.reports.cav_lambda)?;
            write_jsonl(&dir.cavs(), &cavs)?;
            write_manifest(
                dir,
                cfg,
                "cavs",
                &[
                    dir.world(),
                    dir.table(SpaceKind::Semantic),
                    dir.table(SpaceKind::Behavioral),
                ],
                &[dir.cavs()],
            )?;
            print(
                json!({"cavs": cavs.iter().map(|c| json!({"attr": c.attr, "space": c.space, "acc": c.acc})).collect::<Vec<_>>()}),
            );
        }
        GeomCommand::Sweeps { checkpoint } => {
            let ck = checkpoint_path(dir, &checkpoint);
            let art = Artifacts::load(cfg, dir, &ck)?;
            let cavs = load_cavs(dir)?;
            let (il, is) = interpolation_sweep(&art)?;
            write_jsonl(&dir.report("interpolation_sweep.jsonl"), &il)?;
            write_json(&dir.report("interpolation_summary.json"), &is)?;
            let (cl, cs) = cav_sweep(&art, &cavs)?;
            write_jsonl(&dir.report("cav_sweep.jsonl"), &cl)?;
            write_json(&dir.report("cav_summary.json"), &cs)?;
            write_manifest(
                dir,
                cfg,
                "sweeps",
                &[ck, dir.cavs()],
                &[dir.root.join("reports")],
            )?;
            print(json!({"interpolation": is, "cav": cs}));
        }
    }
    Ok(())
}

fn rlaif(cfg: &PipelineConfig, dir: &RunDir, a: RlaifArgs) -> Result<()> {
    let ck_path = checkpoint_path(dir, &a.checkpoint);
    let art = Artifacts::load(cfg, dir, &ck_path)?;
    let item = match a.item {
        Some(i) => i,
        None => {
            let first = *art
                .test_items()
                .first()
                .ok_or_else(|| ElmError::data("no held-out items"))?;
            art.world.items[first].id.clone()
        }
    };
    let source = art.semantic().require(&item)?.to_vec();
    let vocab = &art.checkpoint.vocab;
    let mode = RewardMode::Semantic { source };
    let mut tokens = vec![EOS];
    match &a.words {
        Some(words) => {
            for w in words.split(',').map(str::trim).filter(|w| !w.is_empty()) {
                tokens.push(
                    vocab
                        .id(w)
                        .ok_or_else(|| ElmError::config(format!("word {w:?} not in vocabulary")))?,
                );
            }
        }
        None => {
            let mut scored: Vec<(f64, usize)> = (elm_core::model::UNK + 1..vocab.len())
                .map(|t| (consistency_reward(&[t, EOS], vocab, &art.encoder, &mode), t))
                .collect();
            scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            tokens.extend(scored.iter().take(2).map(|&(_, t)| t));
        }
    }
    let input = format!("Write a summary of the item ⟨EMB:{item}|semantic⟩.");
    let prompt = build_prompt(vocab, &input, |s| art.tables.resolve(s))?;
    let reference = ElmPolicy::new(art.checkpoint.model.cast::<f64>(), prompt, tokens.clone())?;
    let comdp = Comdp::new(tokens.len(), a.horizon, a.beta, &reference, |t| {
        let ids: Vec<usize> = t.iter().map(|&x| tokens[x]).collect();
        consistency_reward(&ids, vocab, &art.encoder, &mode)
    })?;
    let optimum = exact_soft_policy(&comdp, a.beta)?;
    let j_ref = objective(&comdp, &reference)?;
    let mut policy = reference.clone();
    let rcfg = ReinforceConfig {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed,
        baseline: false,
    };
    let log = reinforce_kl_finetune(&mut policy, &comdp, &rcfg)?;
    write_jsonl(&dir.log("rlaif.jsonl"), &log)?;
    let summary = json!({
        "item": item,
        "actions": tokens.iter().map(|&t| vocab.token(t).unwrap_or("?")).collect::<Vec<_>>(),
        "j_reference": j_ref,
        "j_final": objective(&comdp, &policy)?,
        "j_optimal": optimum.value0(),
        "per_step_kl_to_optimal": per_step_kl(&comdp, &policy, &optimum)?,
    });
    write_json(&dir.report("rlaif_summary.json"), &summary)?;
    write_manifest(
        dir,
        cfg,
        "rlaif",
        &[ck_path],
        &[dir.log("rlaif.jsonl"), dir.report("rlaif_summary.json")],
    )?;
    print(summary);
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
