//! Finite-difference checks: every graph primitive, then the whole training
//! loss on a tiny network with soft Gumbel samples.

use dpn::diffcore::{grad_check, primitive_gradient_suite};
use dpn::trainer::{n_step_returns, segment_loss, TrainConfig, Trainer};

fn main() -> dpn::Result<()> {
    for (name, err) in primitive_gradient_suite(5, 1)? {
        println!("{name:<18} max relative error {err:.2e}");
    }

    let cfg = TrainConfig::from_toml_str(
        "env_size = 5\nenv_goals = 1\nconv_channels = 2\nconv_layers = 1\nz_dim = 4\nh_outer = 4\nh_inner = 4\nT = 2\nworkers = 2\nn_step = 4\nhard_gumbel = false\nsequential = true\n",
        &[],
    )?;
    let mut t = Trainer::new(cfg)?;
    let batch = t.collect()?;
    let n = batch.len();
    for seg in &batch.workers {
        let rewards: Vec<f64> = seg.steps.iter().map(|s| s.reward).collect();
        let dones: Vec<bool> = seg.steps.iter().map(|s| s.done).collect();
        let returns = n_step_returns(&rewards, &dones, seg.bootstrap, t.config.gamma);
        let (agent, settings, weights) = (&t.agent, t.settings(), t.weights());
        let err = grad_check(&t.params, 1e-5, |g| {
            segment_loss(g, agent, seg, &returns, settings, weights, n).expect("loss builds").total
        })?;
        println!("full loss, worker {}: max relative error {err:.2e} over {} parameters", seg.worker, t.params.numel());
    }
    Ok(())
}
