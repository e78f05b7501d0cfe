use super::{Action, EnvConfig, EnvKind, GridState};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: GridState,
    pub reward: f64,
    pub done: bool,
}

/// Advance one step. Stepping a finished episode is a contract violation.
pub fn step(state: &GridState, action: Action, config: &EnvConfig) -> Result<StepOutcome> {
    if state.done {
        return Err(Error::Contract("step called on a finished episode".into()));
    }
    let rw = &config.rewards;
    let mut next = state.clone();
    next.steps_taken += 1;
    let mut reward = rw.step;
    let mut done = false;

    match next.neighbour(next.agent, action) {
        None => {
            // Off the map: the agent keeps its last in-grid cell.
            reward += rw.offmap;
            done = true;
        }
        Some(target) => {
            let mut moved = true;
            if next.boxes.contains(&target) {
                match next.neighbour(target, action) {
                    Some(dest) if !next.boxes.contains(&dest) => {
                        next.boxes.remove(&target);
                        if next.goals.remove(&dest) {
                            reward += rw.goal;
                        } else {
                            next.boxes.insert(dest);
                            if next.obstacles.contains(&dest) {
                                reward += rw.obstacle;
                            }
                        }
                    }
                    // Blocked by another box or the grid edge.
                    _ => moved = false,
                }
            }
            if moved {
                next.agent = target;
                if next.obstacles.contains(&target) {
                    reward += rw.obstacle;
                    done |= rw.obstacle_terminal;
                }
                if config.kind == EnvKind::Gridworld && next.goals.remove(&target) {
                    reward += rw.goal;
                }
            }
        }
    }

    if next.goals.is_empty() {
        done = true;
    }
    if !done && next.steps_taken >= config.step_limit {
        reward += rw.timeout;
        done = true;
    }
    next.done = done;
    Ok(StepOutcome {
        state: next,
        reward,
        done,
    })
}
