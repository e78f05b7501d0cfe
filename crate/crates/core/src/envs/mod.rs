//! Procedurally generated multi-goal Gridworld and box-pushing environments.
//!
//! Both share one state type and one step function; the environment kind
//! decides whether goals are collected by the agent (Gridworld) or consumed
//! by boxes pushed onto them (Push).

mod generate;
mod golden;
mod observation;
mod step;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use generate::{generate, generate_gridworld, generate_push, obstacle_count};
pub use golden::GoldenTrace;
pub use observation::{DecodedEntities, Observation, CHANNELS};
pub use step::{step, StepOutcome};

/// `(row, col)`, origin top-left.
pub type Pos = (usize, usize);

pub const NUM_ACTIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Gridworld,
    Push,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Gridworld => "gridworld",
            EnvKind::Push => "push",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    /// Goal collected (Gridworld) or box delivered (Push).
    pub goal: f64,
    /// Applied on every step.
    pub step: f64,
    pub offmap: f64,
    /// Agent (or, in Push, a box) entering an obstacle cell.
    pub obstacle: f64,
    /// Hitting the step limit without finishing.
    pub timeout: f64,
    pub obstacle_terminal: bool,
}

impl RewardTable {
    pub fn gridworld() -> Self {
        Self {
            goal: 1.0,
            step: -0.01,
            offmap: -1.0,
            obstacle: -1.0,
            timeout: -1.0,
            obstacle_terminal: true,
        }
    }

    pub fn push() -> Self {
        Self {
            goal: 1.0,
            step: -0.01,
            offmap: -1.0,
            obstacle: -0.2,
            timeout: 0.0,
            obstacle_terminal: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Grid side length; both environments are square.
    pub size: usize,
    pub goals: usize,
    /// Push only.
    pub boxes: usize,
    /// Push: exact obstacle count.
    pub obstacles: usize,
    /// Gridworld: fraction of interior (non-border) cells turned into
    /// obstacles.
    pub obstacle_density: f64,
    /// Chebyshev distance enforced between goals and between the agent and
    /// each goal (Gridworld).
    pub min_goal_separation: usize,
    pub step_limit: usize,
    pub rewards: RewardTable,
}

impl EnvConfig {
    pub fn gridworld() -> Self {
        Self {
            kind: EnvKind::Gridworld,
            size: 16,
            goals: 3,
            boxes: 0,
            obstacles: 0,
            obstacle_density: 0.15,
            min_goal_separation: 4,
            step_limit: 70,
            rewards: RewardTable::gridworld(),
        }
    }

    pub fn push() -> Self {
        Self {
            kind: EnvKind::Push,
            size: 8,
            goals: 5,
            boxes: 12,
            obstacles: 6,
            obstacle_density: 0.0,
            min_goal_separation: 0,
            step_limit: 75,
            rewards: RewardTable::push(),
        }
    }

    pub fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Gridworld => Self::gridworld(),
            EnvKind::Push => Self::push(),
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: String| Err(crate::Error::Config(m));
        if self.size < 2 {
            return bad(format!("grid size must be at least 2, got {}", self.size));
        }
        if self.goals == 0 {
            return bad("at least one goal is required".into());
        }
        if self.step_limit == 0 {
            return bad("step_limit must be positive".into());
        }
        match self.kind {
            EnvKind::Gridworld => {
                if !(0.0..1.0).contains(&self.obstacle_density) {
                    return bad(format!("obstacle_density {} not in [0, 1)", self.obstacle_density));
                }
                if self.goals + 1 > self.size * self.size {
                    return bad("too many goals for the grid".into());
                }
            }
            EnvKind::Push => {
                if self.size < 3 {
                    return bad("push needs a grid of at least 3x3".into());
                }
                let inner = (self.size - 2) * (self.size - 2);
                let needed = 1 + self.boxes + self.goals + self.obstacles;
                if needed > inner {
                    return bad(format!("{needed} entities do not fit the central {inner} cells"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridState {
    pub width: usize,
    pub height: usize,
    pub agent: Pos,
    pub boxes: BTreeSet<Pos>,
    pub goals: BTreeSet<Pos>,
    pub obstacles: BTreeSet<Pos>,
    pub steps_taken: usize,
    pub done: bool,
}

impl GridState {
    pub fn empty(width: usize, height: usize, agent: Pos) -> Self {
        Self {
            width,
            height,
            agent,
            boxes: BTreeSet::new(),
            goals: BTreeSet::new(),
            obstacles: BTreeSet::new(),
            steps_taken: 0,
            done: false,
        }
    }

    pub fn in_bounds(&self, (r, c): Pos) -> bool {
        r < self.height && c < self.width
    }

    /// Neighbour of `pos` in direction `action`, if it is on the grid.
    pub fn neighbour(&self, (r, c): Pos, action: Action) -> Option<Pos> {
        let (dr, dc) = action.delta();
        let nr = r.checked_add_signed(dr)?;
        let nc = c.checked_add_signed(dc)?;
        self.in_bounds((nr, nc)).then_some((nr, nc))
    }

    pub fn observe(&self) -> Observation {
        Observation::encode(self)
    }

    /// Plain-text layout: `A` agent, `B` box, `G` goal, `#` obstacle, `.`
    /// empty. Lower-case `a` / `b` mark an agent or box standing on an
    /// obstacle.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                let p = (r, c);
                let obstacle = self.obstacles.contains(&p);
                let ch = if self.agent == p {
                    if obstacle {
                        'a'
                    } else {
                        'A'
                    }
                } else if self.boxes.contains(&p) {
                    if obstacle {
                        'b'
                    } else {
                        'B'
                    }
                } else if self.goals.contains(&p) {
                    'G'
                } else if obstacle {
                    '#'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for GridState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}
