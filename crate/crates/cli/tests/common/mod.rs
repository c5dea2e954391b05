#![allow(dead_code)]

use std::path::Path;

/// A run small enough to train in well under a second.
pub const TINY: &str = r#"
[world]
n_items = 24
n_users = 40

[ratings]
density = 0.8

[wals]
k = 4

[model]
d_model = 16
layers = 1
heads = 2
ff_hidden = 32
adapter_hidden = 32

[pretrain]
steps = 20
batch_size = 8

[stage1]
steps = 10
batch_size = 8
eval_every = 5

[stage2]
steps = 10
batch_size = 8
eval_every = 5

[eval]
max_len = 12
candidates = 8
heldout_cap = 16

[reports]
interp_pairs = 2
cav_users = 2
cav_alphas = [0.0, 1.0]
"#;

pub fn write_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

pub fn elm(run: &Path, config: &Path, args: &[&str]) -> i32 {
    let mut argv = vec![
        "elm".to_string(),
        "--run-dir".into(),
        run.display().to_string(),
        "--config".into(),
        config.display().to_string(),
    ];
    argv.extend(args.iter().map(|s| s.to_string()));
    elm_cli::cli::run(argv)
}
