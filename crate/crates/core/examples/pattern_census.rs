//! Trains a small planning network briefly, then records its plans on
//! fresh layouts and counts breadth-first, depth-first and mixed plans.
//!
//! `cargo run --release --example pattern_census -- 20000` sets the number
//! of training steps (default 20k).

use dpn::cli::{run_patterns, run_trace};
use dpn::trainer::{TrainConfig, Trainer};

fn main() -> dpn::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let cfg = TrainConfig::from_toml_str(
        &format!(
            "env_size = 8\nenv_goals = 1\nworkers = 4\nn_step = 10\nT = 3\nconv_channels = 8\nz_dim = 32\nh_outer = 32\nh_inner = 32\nlr = 0.002\nclip_norm = 5.0\ntotal_steps = {steps}\n"
        ),
        &[],
    )?;
    let dir = std::env::temp_dir().join("dpn_pattern_census");
    let summary = Trainer::new(cfg)?.run(&dir, false)?;
    println!("trained {} steps, last-100 reward {:?}", summary.env_steps, summary.mean_reward_100);

    let traces = dir.join("traces.jsonl");
    let n = run_trace(&summary.checkpoint, None, 50, false, 1, &traces)?;
    println!("{n} plans recorded in {}\n", traces.display());
    println!("{}", run_patterns(&traces)?);
    Ok(())
}
