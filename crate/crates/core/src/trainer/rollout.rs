use rayon::prelude::*;

use crate::agent::{act, Agent, PlanSettings};
use crate::diffcore::{Graph, ParamSet};
use crate::envs::{generate, step, Action, EnvConfig, GridState, Observation};
use crate::error::Result;
use crate::planner::{PlanTrace, RecordingNoise};
use crate::rng::{stream_id, stream_rng};

const EPISODE_STREAM: u64 = 0x6570_6973;
const NOISE_STREAM: u64 = 0x6e6f_6973;
const ACTION_STREAM: u64 = 0x6163_7473;

/// Layout seed of a worker's `episode`-th episode.
pub fn episode_seed(seed: u64, worker: usize, episode: u64) -> u64 {
    stream_id(&[EPISODE_STREAM, seed, worker as u64, episode])
}

/// One worker's environment together with its episode bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerEnv {
    pub worker: usize,
    pub state: GridState,
    /// Episodes begun so far, including the running one.
    pub episodes_started: u64,
    pub episode_reward: f64,
}

impl WorkerEnv {
    pub fn new(config: &EnvConfig, seed: u64, worker: usize) -> Result<Self> {
        Self::resume(config, seed, worker, 0)
    }

    /// Starts episode number `episodes_started` of this worker.
    pub fn resume(config: &EnvConfig, seed: u64, worker: usize, episodes_started: u64) -> Result<Self> {
        Ok(Self {
            worker,
            state: generate(config, episode_seed(seed, worker, episodes_started))?,
            episodes_started: episodes_started + 1,
            episode_reward: 0.0,
        })
    }

    fn reset(&mut self, config: &EnvConfig, seed: u64) -> Result<()> {
        *self = Self::resume(config, seed, self.worker, self.episodes_started)?;
        Ok(())
    }
}

/// One environment step as seen by the learner.
#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    /// `V(z_t)` at collection time.
    pub value: f64,
    pub log_prob: f64,
    /// Gumbel draws consumed by the plan, for exact replay.
    pub noise: Vec<Vec<f64>>,
    pub trace: Option<PlanTrace>,
    pub next_obs: Observation,
}

#[derive(Clone, Debug)]
pub struct WorkerRollout {
    pub worker: usize,
    pub steps: Vec<Transition>,
    /// `V(s_{t+n})` of the state the worker stopped in.
    pub bootstrap: f64,
    /// Rewards of episodes that finished during this segment, in order.
    pub completed: Vec<f64>,
    pub transition_calls: u64,
}

/// `[workers × n_step]` experience from one iteration.
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub workers: Vec<WorkerRollout>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.workers.iter().map(|w| w.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transition_calls(&self) -> u64 {
        self.workers.iter().map(|w| w.transition_calls).sum()
    }

    /// Completed episode rewards in worker order.
    pub fn completed(&self) -> impl Iterator<Item = f64> + '_ {
        self.workers.iter().flat_map(|w| w.completed.iter().copied())
    }
}

/// Advances one worker `n_step` environment steps. Randomness comes from
/// streams keyed by `(seed, worker, iteration)`, so the result does not depend
/// on which thread runs it.
#[allow(clippy::too_many_arguments)]
pub fn collect_worker(
    agent: &Agent,
    params: &ParamSet,
    env: &mut WorkerEnv,
    env_config: &EnvConfig,
    settings: PlanSettings,
    n_step: usize,
    seed: u64,
    iteration: u64,
) -> Result<WorkerRollout> {
    let w = env.worker as u64;
    let mut noise_rng = stream_rng(seed, stream_id(&[NOISE_STREAM, w, iteration]));
    let mut act_rng = stream_rng(seed, stream_id(&[ACTION_STREAM, w, iteration]));
    let mut steps = Vec::with_capacity(n_step);
    let mut completed = Vec::new();
    let mut transition_calls = 0;

    for t in 0..n_step {
        let obs = env.state.observe();
        let mut noise = RecordingNoise::new(&mut noise_rng);
        let out = act(agent, params, &obs, settings, false, &mut noise, &mut act_rng)?;
        let draws = noise.draws;
        let trace = out.plan.map(|mut tr| {
            tr.origin = format!("w{}/e{}/i{}/t{}", env.worker, env.episodes_started - 1, iteration, t);
            transition_calls += tr.horizon as u64;
            tr
        });
        let result = step(&env.state, Action::from_index(out.action).expect("valid action"), env_config)?;
        env.episode_reward += result.reward;
        let next_obs = result.state.observe();
        steps.push(Transition {
            obs,
            action: out.action,
            reward: result.reward,
            done: result.done,
            value: out.value,
            log_prob: out.log_prob,
            noise: draws,
            trace,
            next_obs,
        });
        if result.done {
            completed.push(env.episode_reward);
            env.reset(env_config, seed)?;
        } else {
            env.state = result.state;
        }
    }

    let mut g = Graph::inference(params);
    let z = agent.encode(&mut g, &env.state.observe())?;
    let v = agent.value(&mut g, z);
    Ok(WorkerRollout {
        worker: env.worker,
        steps,
        bootstrap: g.scalar(v),
        completed,
        transition_calls,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    agent: &Agent,
    params: &ParamSet,
    envs: &mut [WorkerEnv],
    env_config: &EnvConfig,
    settings: PlanSettings,
    n_step: usize,
    seed: u64,
    iteration: u64,
    parallel: bool,
) -> Result<RolloutBatch> {
    let run = |env: &mut WorkerEnv| collect_worker(agent, params, env, env_config, settings, n_step, seed, iteration);
    let workers = if parallel {
        envs.par_iter_mut().map(run).collect::<Result<Vec<_>>>()?
    } else {
        envs.iter_mut().map(run).collect::<Result<Vec<_>>>()?
    };
    Ok(RolloutBatch { workers })
}

/// `R_t = r_t + γ·R_{t+1}`, cut at episode ends and bootstrapped from
/// `V(s_{t+n})` after the last step.
pub fn n_step_returns(rewards: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), dones.len(), "rewards and dones must align");
    let mut out = vec![0.0; rewards.len()];
    let mut next = bootstrap;
    for t in (0..rewards.len()).rev() {
        if dones[t] {
            next = 0.0;
        }
        next = rewards[t] + gamma * next;
        out[t] = next;
    }
    out
}
