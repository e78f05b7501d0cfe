//! Generates a default 16×16 Gridworld and walks it with random actions,
//! printing the layout and every reward until the episode ends.

use dpn::envs::{generate, step, Action, EnvConfig};
use dpn::rng::stream_rng;
use rand::seq::SliceRandom;

fn main() -> dpn::Result<()> {
    let config = EnvConfig::gridworld();
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let mut state = generate(&config, seed)?;
    println!("seed {seed}: A agent, G goal, # obstacle\n{}", state.render());
    let mut rng = stream_rng(seed, 1);
    let mut total = 0.0;
    loop {
        let a = *Action::ALL.choose(&mut rng).unwrap();
        let out = step(&state, a, &config)?;
        total += out.reward;
        println!("step {:>2} {a:?}: reward {:+.2}", out.state.steps_taken, out.reward);
        if out.done {
            println!("episode over after {} steps, return {total:.2}", out.state.steps_taken);
            println!("{}", out.state.render());
            return Ok(());
        }
        state = out.state;
    }
}
