//! Regression fixtures: a seed, an action sequence and the rewards and
//! terminal flags it produced, one JSON object per line.

use serde::{Deserialize, Serialize};

use super::{generate, step, Action, EnvConfig, EnvKind};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldenTrace {
    pub kind: EnvKind,
    pub seed: u64,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl GoldenTrace {
    /// Plays `actions` from the layout for `seed`, stopping early at the end
    /// of the episode.
    pub fn record(config: &EnvConfig, seed: u64, actions: &[Action]) -> Result<Self> {
        let mut state = generate(config, seed)?;
        let mut trace = Self {
            kind: config.kind,
            seed,
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
        };
        for &a in actions {
            let out = step(&state, a, config)?;
            trace.actions.push(a);
            trace.rewards.push(out.reward);
            trace.dones.push(out.done);
            state = out.state;
            if out.done {
                break;
            }
        }
        Ok(trace)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("golden trace serialises")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })
    }

    /// Re-plays the trace and reports whether rewards and flags match bit for
    /// bit.
    pub fn verify(&self, config: &EnvConfig) -> Result<bool> {
        Ok(Self::record(config, self.seed, &self.actions)? == *self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trip_and_replay() {
        let cfg = EnvConfig::push();
        let actions: Vec<Action> = (0..40).map(|i| Action::ALL[(i * 7 + 3) % 4]).collect();
        let t = GoldenTrace::record(&cfg, 17, &actions).unwrap();
        let back = GoldenTrace::from_line(&t.to_line()).unwrap();
        assert_eq!(back, t);
        assert!(back.verify(&cfg).unwrap());
    }
}
