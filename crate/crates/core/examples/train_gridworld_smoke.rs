//! The learning smoke run: 8×8 Gridworld with one goal, 200k steps on 4
//! workers, for the planning network (T = 2) and the A2C baseline, each
//! compared with a uniform-random policy on the same layouts.
//!
//! Takes a few minutes in release mode. Pass a step count to shorten it.

use std::time::Instant;

use dpn::trainer::{random_policy_baseline, TrainConfig, Trainer};

pub const SMOKE_CONFIG: &str = include_str!("../configs/smoke_gridworld.toml");

fn main() -> dpn::Result<()> {
    let steps = std::env::args().nth(1).unwrap_or_else(|| "200000".into());
    let random = {
        let cfg = TrainConfig::from_toml_str(SMOKE_CONFIG, &[])?;
        random_policy_baseline(&cfg.env_config(), 1000, cfg.seed)?
    };
    println!("uniform-random policy, 1000 episodes: {random:.3}");
    for model in ["dpn", "a2c"] {
        let cfg = TrainConfig::from_toml_str(SMOKE_CONFIG, &[format!("model={model}"), format!("total_steps={steps}")])?;
        let start = Instant::now();
        let mut t = Trainer::new(cfg)?;
        while !t.finished() {
            t.step()?;
            if t.iteration % 1000 == 0 {
                println!("  {model} {:>7} steps  last-100 {:.3}", t.env_steps, t.mean_recent(100).unwrap_or(f64::NAN));
            }
        }
        let last = t.mean_recent(100).unwrap_or(f64::NAN);
        println!(
            "{model}: last-100 {last:.3} ({:+.3} over random) after {} episodes, {:.0}s",
            last - random,
            t.episodes,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
