use std::collections::BTreeSet;

use super::{GridState, Pos};
use crate::diffcore::Value;

/// Entity planes in channel order: agent, box, goal, obstacle.
pub const CHANNELS: usize = 4;
const AGENT: usize = 0;
const BOX: usize = 1;
const GOAL: usize = 2;
const OBSTACLE: usize = 3;

/// One-hot entity planes, `[CHANNELS, height, width]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedEntities {
    pub agent: Option<Pos>,
    pub boxes: BTreeSet<Pos>,
    pub goals: BTreeSet<Pos>,
    pub obstacles: BTreeSet<Pos>,
}

impl Observation {
    pub fn encode(state: &GridState) -> Self {
        let (h, w) = (state.height, state.width);
        let mut obs = Self {
            height: h,
            width: w,
            data: vec![0.0; CHANNELS * h * w],
        };
        obs.set(AGENT, state.agent);
        for p in &state.boxes {
            obs.set(BOX, *p);
        }
        for p in &state.goals {
            obs.set(GOAL, *p);
        }
        for p in &state.obstacles {
            obs.set(OBSTACLE, *p);
        }
        obs
    }

    fn set(&mut self, channel: usize, (r, c): Pos) {
        let i = (channel * self.height + r) * self.width + c;
        self.data[i] = 1.0;
    }

    pub fn shape(&self) -> [usize; 3] {
        [CHANNELS, self.height, self.width]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn to_value(&self) -> Value {
        Value::new(self.shape().to_vec(), self.data.clone())
    }

    /// Inverse of [`Observation::encode`] on the entity sets.
    pub fn decode(&self) -> DecodedEntities {
        let cells = |c: usize| -> BTreeSet<Pos> {
            self.channel(c)
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, _)| (i / self.width, i % self.width))
                .collect()
        };
        DecodedEntities {
            agent: cells(AGENT).into_iter().next(),
            boxes: cells(BOX),
            goals: cells(GOAL),
            obstacles: cells(OBSTACLE),
        }
    }
}
