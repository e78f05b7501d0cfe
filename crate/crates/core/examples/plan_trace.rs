//! One planning pass of an untrained network on a Gridworld state, under
//! each branching mode. Prints the recorded selections, simulated actions
//! and utilities, the exported JSON line, and the plan's pattern.

use dpn::envs::{generate, EnvConfig};
use dpn::model::{Distance, DpnModel, ModelConfig};
use dpn::planner::{classify_pattern, plan, BranchingMode, RngNoise};
use dpn::diffcore::Graph;
use dpn::rng::stream_rng;

fn main() -> dpn::Result<()> {
    let env = EnvConfig::gridworld();
    let state = generate(&env, 5)?;
    let mut cfg = ModelConfig::new(env.size, env.size);
    (cfg.conv_channels, cfg.z_dim, cfg.h_outer, cfg.h_inner) = (8, 32, 32, 32);
    let model = DpnModel::new(cfg);
    let params = model.init_params(&mut stream_rng(1, 0));
    let mut rng = stream_rng(1, 1);

    for mode in [BranchingMode::All, BranchingMode::Current, BranchingMode::Reset] {
        let mut g = Graph::inference(&params);
        let z0 = model.encode(&mut g, &state.observe())?;
        let p = plan(&mut g, &model, z0, 3, mode, Distance::L1, &mut RngNoise(&mut rng))?;
        println!("mode {mode}: {} transition calls, pattern {}", p.transition_calls, classify_pattern(&p.trace)?);
        for s in &p.trace.steps {
            println!(
                "  τ={} expand {:?} with action {}  utility {:.4} = value {:.4} + distance {:.4}",
                s.step, s.selection, s.action, s.utility, s.value, s.distance
            );
        }
        let line = p.trace.to_line()?;
        println!("  exported {} bytes: {}…", line.len(), &line[..line.len().min(100)]);
    }
    Ok(())
}
