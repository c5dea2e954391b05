//! Runs the whole pipeline with default settings into the directory given
//! as the first argument and prints the summary.

use elm_core::pipeline::{run_all, PipelineConfig, RunDir};

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "run".into());
    let started = std::time::Instant::now();
    match run_all(&PipelineConfig::default(), &RunDir::new(&dir)) {
        Ok(s) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&s).expect("summary serializes")
            );
            println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
