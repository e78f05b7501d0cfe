use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;

use super::{EnvConfig, EnvKind, GridState, Pos};
use crate::error::{Error, Result};
use crate::rng::{stream_id, stream_rng, StreamRng};

/// Placement attempts per layout before moving to the next derived sub-seed.
const PLACEMENT_TRIES: usize = 200;
const OBSTACLE_TRIES: usize = 100;
const LAYOUT_RESTARTS: u64 = 64;

const GRIDWORLD_STREAM: u64 = 0x6772_6964;
const PUSH_STREAM: u64 = 0x7075_7368;

pub fn generate(config: &EnvConfig, seed: u64) -> Result<GridState> {
    match config.kind {
        EnvKind::Gridworld => generate_gridworld(config, seed),
        EnvKind::Push => generate_push(config, seed),
    }
}

fn chebyshev(a: Pos, b: Pos) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Random multi-goal Gridworld. The agent and goals are pairwise at least
/// `min_goal_separation` apart and every goal is reachable from the agent
/// around the obstacles.
pub fn generate_gridworld(config: &EnvConfig, seed: u64) -> Result<GridState> {
    if config.kind != EnvKind::Gridworld {
        return Err(Error::Contract("generate_gridworld needs a gridworld config".into()));
    }
    config.validate()?;
    for attempt in 0..LAYOUT_RESTARTS {
        let mut rng = stream_rng(seed, stream_id(&[GRIDWORLD_STREAM, attempt]));
        if let Some(state) = try_gridworld(config, &mut rng) {
            return Ok(state);
        }
    }
    Err(Error::InvalidInput(format!(
        "no gridworld layout satisfies the constraints after {LAYOUT_RESTARTS} sub-seeds (seed {seed})"
    )))
}

fn try_gridworld(config: &EnvConfig, rng: &mut StreamRng) -> Option<GridState> {
    let n = config.size;
    let cell = |rng: &mut StreamRng| (rng.gen_range(0..n), rng.gen_range(0..n));
    let agent = cell(rng);
    let mut anchors = vec![agent];
    for _ in 0..config.goals {
        let placed = (0..PLACEMENT_TRIES).map(|_| cell(rng)).find(|p| {
            anchors
                .iter()
                .all(|a| *a != *p && chebyshev(*a, *p) >= config.min_goal_separation)
        })?;
        anchors.push(placed);
    }
    let goals: BTreeSet<Pos> = anchors[1..].iter().copied().collect();
    // Obstacles go on interior (non-border) cells only.
    let mut free: Vec<Pos> = (1..n.saturating_sub(1))
        .flat_map(|r| (1..n - 1).map(move |c| (r, c)))
        .filter(|p| *p != agent && !goals.contains(p))
        .collect();
    let count = obstacle_count(config).min(free.len());
    for _ in 0..OBSTACLE_TRIES {
        free.shuffle(rng);
        let obstacles: BTreeSet<Pos> = free[..count].iter().copied().collect();
        let mut state = GridState::empty(n, n, agent);
        state.goals = goals.clone();
        state.obstacles = obstacles;
        if goals_reachable(&state) {
            return Some(state);
        }
    }
    None
}

/// `round(density · interior cells)`, where the interior excludes the border.
pub fn obstacle_count(config: &EnvConfig) -> usize {
    let inner = config.size.saturating_sub(2);
    (config.obstacle_density * (inner * inner) as f64).round() as usize
}

/// 4-connected flood fill from the agent through non-obstacle cells.
pub(crate) fn goals_reachable(state: &GridState) -> bool {
    let mut seen = vec![false; state.width * state.height];
    let idx = |(r, c): Pos| r * state.width + c;
    let mut queue = VecDeque::from([state.agent]);
    seen[idx(state.agent)] = true;
    while let Some(p) = queue.pop_front() {
        for a in super::Action::ALL {
            if let Some(q) = state.neighbour(p, a) {
                if !seen[idx(q)] && !state.obstacles.contains(&q) {
                    seen[idx(q)] = true;
                    queue.push_back(q);
                }
            }
        }
    }
    state.goals.iter().all(|g| seen[idx(*g)])
}

/// Random Push layout with every entity on the central `(size-2)²` cells.
pub fn generate_push(config: &EnvConfig, seed: u64) -> Result<GridState> {
    if config.kind != EnvKind::Push {
        return Err(Error::Contract("generate_push needs a push config".into()));
    }
    config.validate()?;
    let n = config.size;
    let mut rng = stream_rng(seed, stream_id(&[PUSH_STREAM, 0]));
    let mut cells: Vec<Pos> = (1..n - 1)
        .flat_map(|r| (1..n - 1).map(move |c| (r, c)))
        .collect();
    cells.shuffle(&mut rng);
    let mut it = cells.into_iter();
    let agent = it.next().expect("validated capacity");
    let mut state = GridState::empty(n, n, agent);
    state.boxes = it.by_ref().take(config.boxes).collect();
    state.goals = it.by_ref().take(config.goals).collect();
    state.obstacles = it.by_ref().take(config.obstacles).collect();
    Ok(state)
}
