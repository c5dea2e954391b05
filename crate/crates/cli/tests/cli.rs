mod common;

use common::{elm, write_config};
use elm_core::pipeline::content_hash;

fn read_lines(p: &std::path::Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn step_by_step_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    let steps: [&[&str]; 6] = [
        &["gen-world", "--seed", "7"],
        &["ratings"],
        &["embed"],
        &["tasks"],
        &["pretrain"],
        &["train"],
    ];
    for s in steps {
        assert_eq!(elm(&run, &cfg, s), 0, "{s:?}");
    }
    assert_eq!(
        elm(
            &run,
            &cfg,
            &["eval", "--split", "test", "--metrics", "sc,bc"]
        ),
        0
    );
    assert_eq!(
        read_lines(&run.join("eval/test.jsonl")),
        read_lines(&run.join("tasks/test.jsonl"))
    );
    assert_eq!(
        elm(&run, &cfg, &["eval", "--split", "train", "--metrics", "sc"]),
        0
    );
    let line = std::fs::read_to_string(run.join("eval/train.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert!(first["bc_spearman"].is_null());

    assert_eq!(
        elm(
            &run,
            &cfg,
            &[
                "geom",
                "interpolate",
                "--a",
                "item_0001",
                "--b",
                "item_0002",
                "--alpha",
                "0.5",
                "--task",
                "summary"
            ]
        ),
        0
    );
    assert_eq!(
        elm(
            &run,
            &cfg,
            &[
                "geom",
                "cav",
                "--base",
                "item_0001",
                "--attr",
                "x",
                "--alpha",
                "1"
            ]
        ),
        3
    );
    assert_eq!(elm(&run, &cfg, &["geom", "train-cavs"]), 0);
    assert!(run.join("cavs.jsonl").exists());
    let attr = {
        let l = std::fs::read_to_string(run.join("cavs.jsonl")).unwrap();
        let v: serde_json::Value = serde_json::from_str(l.lines().next().unwrap()).unwrap();
        v["attr"].as_str().unwrap().to_string()
    };
    assert_eq!(
        elm(
            &run,
            &cfg,
            &[
                "geom",
                "cav",
                "--base",
                "item_0001",
                "--attr",
                &attr,
                "--alpha",
                "1.5"
            ]
        ),
        0
    );
    assert_eq!(elm(&run, &cfg, &["geom", "sweeps"]), 0);
    assert!(run.join("reports/interpolation_sweep.jsonl").exists());
    assert_eq!(
        elm(
            &run,
            &cfg,
            &["rlaif", "--steps", "5", "--batch", "4", "--horizon", "2"]
        ),
        0
    );
    assert_eq!(read_lines(&run.join("logs/rlaif.jsonl")), 5);
    for m in [
        "gen-world",
        "ratings",
        "embed",
        "tasks",
        "pretrain",
        "train",
        "eval-test",
        "cavs",
        "sweeps",
        "rlaif",
    ] {
        assert!(run.join(format!("manifests/{m}.json")).exists(), "{m}");
    }
}

#[test]
fn gen_world_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = [
        "gen-world",
        "--seed",
        "7",
        "--items",
        "200",
        "--users",
        "500",
        "--attrs",
        "5",
    ];
    assert_eq!(elm(&a, &cfg, &args), 0);
    assert_eq!(elm(&b, &cfg, &args), 0);
    assert_eq!(
        content_hash(&a.join("world.json")).unwrap(),
        content_hash(&b.join("world.json")).unwrap()
    );
}

#[test]
fn interrupted_stage_two_resumes_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    for s in [
        &["gen-world"][..],
        &["ratings"],
        &["embed"],
        &["tasks"],
        &["pretrain"],
        &["train"],
    ] {
        assert_eq!(elm(&run, &cfg, s), 0);
    }
    let straight = content_hash(&run.join("checkpoints/stage2/params.bin")).unwrap();
    assert_eq!(elm(&run, &cfg, &["train", "--stage2-steps", "4"]), 0);
    assert_ne!(
        content_hash(&run.join("checkpoints/stage2/params.bin")).unwrap(),
        straight
    );
    assert_eq!(elm(&run, &cfg, &["train", "--resume"]), 0);
    assert_eq!(
        content_hash(&run.join("checkpoints/stage2/params.bin")).unwrap(),
        straight
    );
    let steps: Vec<u64> = std::fs::read_to_string(run.join("logs/train.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, (1..=20).collect::<Vec<_>>());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    assert_eq!(elm(&run, &cfg, &["gen-world", "--bogus"]), 2);
    assert_eq!(elm(&run, &cfg, &["frobnicate"]), 2);
    // Missing inputs are data errors.
    assert_eq!(elm(&run, &cfg, &["ratings"]), 3);
    assert_eq!(elm(&run, &cfg, &["gen-world", "--attrs", "1"]), 2);
    assert_eq!(elm(&run, &cfg, &["gen-world"]), 0);
    assert_eq!(elm(&run, &cfg, &["ratings", "--density", "0"]), 2);
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[world]\nn_itemz = 3\n").unwrap();
    assert_eq!(elm(&run, &bad, &["gen-world"]), 2);
    assert_eq!(elm(&run, &cfg, &["eval", "--metrics", "sc,xyz"]), 2);
}
