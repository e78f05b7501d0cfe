//! Trains the planning network and the baseline on the same small task,
//! evaluates both checkpoints greedily, and writes the overlaid training
//! curves as CSV and SVG.
//!
//! `cargo run --release --example compare_and_plot -- 50000 out/compare`

use std::path::PathBuf;

use dpn::cli::{run_eval, run_plot};
use dpn::trainer::{train, TrainConfig};

fn main() -> dpn::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().unwrap_or_else(|| "50000".into());
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/compare".into()));
    let mut metrics = Vec::new();
    for model in ["dpn", "a2c"] {
        let cfg = TrainConfig::load(
            &PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/smoke_gridworld.toml"),
            &[format!("model={model}"), format!("total_steps={steps}")],
        )?;
        let summary = train(cfg, &out.join(model))?;
        let eval = run_eval(&summary.checkpoint, None, 200, true, 99)?;
        println!("{model}: training last-100 {:?}; greedy eval {eval}", summary.mean_reward_100);
        metrics.push(summary.metrics);
    }
    let report = run_plot(&metrics, &out.join("plots"), 1000)?;
    for p in report.csv.iter().chain(&report.images) {
        println!("wrote {}", p.display());
    }
    Ok(())
}
