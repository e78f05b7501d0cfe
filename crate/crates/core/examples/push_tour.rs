//! A Push layout: 12 boxes, 5 goals and 6 soft obstacles in the central 6×6
//! of an 8×8 grid. Plays a short scripted episode and prints each frame, so
//! the pushing rules can be seen directly.

use dpn::envs::{generate, step, Action, EnvConfig, Observation};

fn main() -> dpn::Result<()> {
    let config = EnvConfig::push();
    let mut state = generate(&config, 11)?;
    println!("B box, G goal, # obstacle, A agent\n{}", state.render());
    let obs: Observation = state.observe();
    println!("observation shape {:?}", obs.shape());
    let script = [Action::Up, Action::Up, Action::Left, Action::Down, Action::Right, Action::Right];
    for a in script {
        let out = step(&state, a, &config)?;
        println!("{a:?}: reward {:+.2}, boxes {}, goals {}", out.reward, out.state.boxes.len(), out.state.goals.len());
        println!("{}", out.state.render());
        if out.done {
            break;
        }
        state = out.state;
    }
    Ok(())
}
