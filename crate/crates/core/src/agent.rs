//! One interface over the planning network and the baseline, used by the
//! trainer, evaluation and trace capture.

use rand::Rng;

use crate::baseline::{choose, BaselineModel};
use crate::diffcore::{log_softmax, Graph, ParamSet, Var};
use crate::envs::Observation;
use crate::error::Result;
use crate::model::{DpnModel, Distance};
use crate::planner::{plan, BranchingMode, NoiseSource, Plan};
use crate::trainer::{ModelKind, TrainConfig};

#[derive(Clone, Debug)]
pub enum Agent {
    Dpn(DpnModel),
    A2c(BaselineModel),
}

/// Graph handles for one acting decision.
#[derive(Clone, Debug)]
pub struct Decision {
    pub z: Var,
    pub logits: Var,
    pub value: Var,
    pub plan: Option<Plan>,
}

/// Planning settings that do not live in the model itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanSettings {
    pub horizon: usize,
    pub mode: BranchingMode,
    pub metric: Distance,
}

impl PlanSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            horizon: cfg.horizon(),
            mode: cfg.branching,
            metric: cfg.metric,
        }
    }
}

impl Agent {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        match cfg.model {
            ModelKind::Dpn => Agent::Dpn(DpnModel::new(cfg.model_config())),
            ModelKind::A2c => Agent::A2c(BaselineModel::new(cfg.model_config())),
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        match self {
            Agent::Dpn(m) => m.init_params(rng),
            Agent::A2c(m) => m.init_params(rng),
        }
    }

    pub fn zero_params(&self) -> ParamSet {
        match self {
            Agent::Dpn(m) => m.zero_params(),
            Agent::A2c(m) => m.zero_params(),
        }
    }

    pub fn encode(&self, g: &mut Graph<'_>, obs: &Observation) -> Result<Var> {
        match self {
            Agent::Dpn(m) => m.encoder().encode(g, obs),
            Agent::A2c(m) => m.encoder().encode(g, obs),
        }
    }

    /// `V(z)`; both agents share the same value head.
    pub fn value(&self, g: &mut Graph<'_>, z: Var) -> Var {
        match self {
            Agent::Dpn(m) => m.value(g, z),
            Agent::A2c(m) => m.heads(g, z).1,
        }
    }

    /// Acting logits and value for an embedded state, planning first when
    /// the agent is the planning network.
    pub fn decide(
        &self,
        g: &mut Graph<'_>,
        z: Var,
        settings: PlanSettings,
        noise: &mut dyn NoiseSource,
    ) -> Result<Decision> {
        match self {
            Agent::Dpn(m) => {
                let p = plan(g, m, z, settings.horizon, settings.mode, settings.metric, noise)?;
                let logits = m.act_logits(g, p.final_hidden, p.h_outer0);
                let value = m.value_from_hidden(g, p.h_outer0);
                Ok(Decision {
                    z,
                    logits,
                    value,
                    plan: Some(p),
                })
            }
            Agent::A2c(m) => {
                let (logits, value) = m.heads(g, z);
                Ok(Decision {
                    z,
                    logits,
                    value,
                    plan: None,
                })
            }
        }
    }
}

/// A decision reduced to plain numbers, ready to act on.
#[derive(Clone, Debug)]
pub struct ActOutcome {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub plan: Option<crate::planner::PlanTrace>,
}

/// Forward pass without gradient tracking followed by action choice.
pub fn act<R: Rng + ?Sized>(
    agent: &Agent,
    params: &ParamSet,
    obs: &Observation,
    settings: PlanSettings,
    greedy: bool,
    noise: &mut dyn NoiseSource,
    rng: &mut R,
) -> Result<ActOutcome> {
    let mut g = Graph::inference(params);
    let z = agent.encode(&mut g, obs)?;
    let d = agent.decide(&mut g, z, settings, noise)?;
    let lp = log_softmax(g.value(d.logits));
    let action = choose(&lp, greedy, rng);
    Ok(ActOutcome {
        action,
        log_prob: lp[action],
        value: g.scalar(d.value),
        plan: d.plan.map(|p| p.trace),
    })
}
