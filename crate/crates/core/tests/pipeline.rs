use std::collections::BTreeMap;
use std::path::Path;

use elm_core::pipeline::{content_hash, run_all, PipelineConfig, RunDir};
use elm_core::world::WorldConfig;

pub fn tiny_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.world = WorldConfig {
        n_items: 24,
        n_users: 40,
        ..WorldConfig::default()
    };
    cfg.ratings.density = 0.8;
    cfg.wals.k = 4;
    cfg.model.d_model = 16;
    cfg.model.layers = 1;
    cfg.model.heads = 2;
    cfg.model.ff_hidden = 32;
    cfg.model.adapter_hidden = 32;
    cfg.pretrain.steps = 20;
    cfg.pretrain.batch_size = 8;
    cfg.stage1.steps = 10;
    cfg.stage1.batch_size = 8;
    cfg.stage1.eval_every = 5;
    cfg.stage2.steps = 10;
    cfg.stage2.batch_size = 8;
    cfg.stage2.eval_every = 5;
    cfg.eval.max_len = 12;
    cfg.eval.candidates = 8;
    cfg.eval.heldout_cap = 16;
    cfg.reports.interp_pairs = 2;
    cfg.reports.cav_users = 2;
    cfg.reports.cav_alphas = vec![0.0, 1.0];
    cfg
}

fn hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in walk(root) {
        let rel = entry
            .strip_prefix(root)
            .unwrap()
            .to_string_lossy()
            .into_owned();
        out.insert(rel, content_hash(&entry).unwrap());
    }
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn tiny_run_is_complete_and_reproducible() {
    let cfg = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run_all(&cfg, &RunDir::new(a.path())).unwrap();
    let sb = run_all(&cfg, &RunDir::new(b.path())).unwrap();
    assert_eq!(sa, sb);
    let (ha, hb) = (hashes(a.path()), hashes(b.path()));
    assert_eq!(ha, hb);
    for f in [
        "world.json",
        "ratings.csv",
        "embeddings/semantic.jsonl",
        "embeddings/behavioral.jsonl",
        "tasks/train.jsonl",
        "tasks/test.jsonl",
        "checkpoints/base/params.bin",
        "checkpoints/stage1/manifest.json",
        "checkpoints/stage2/optimizer.bin",
        "eval/test.jsonl",
        "reports/interpolation_sweep.jsonl",
        "reports/cav_sweep.jsonl",
        "cavs.jsonl",
        "manifests/eval.json",
        "config.toml",
    ] {
        assert!(ha.contains_key(f), "missing {f}");
    }
    assert_eq!(sa.interpolation.endpoint_identical, 2);
    assert_eq!(sa.two_stage.boundary_step, 10);
    let test_lines = std::fs::read_to_string(a.path().join("tasks/test.jsonl"))
        .unwrap()
        .lines()
        .count();
    let report_lines = std::fs::read_to_string(a.path().join("eval/test.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(test_lines, report_lines);
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = tiny_config();
    let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.digest(), cfg.digest());
    assert!(PipelineConfig::from_toml("[world]\nbogus = 1\n").is_err());
    assert_eq!(
        PipelineConfig::from_toml("").unwrap(),
        PipelineConfig::default()
    );
}
