//! Synchronous advantage actor-critic training for the planning network and
//! the baseline.
//!
//! Each iteration collects `n_step` transitions from every worker under the
//! current parameters, rebuilds the plans on a gradient graph by replaying
//! the recorded Gumbel draws, and applies one RMSprop update to
//! `L_O + L_I + λ·L_Z − β·(H_O + H_I)`.

mod checkpoint;
mod config;
mod loss;
mod metrics;
mod optim;
mod rollout;

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

pub use checkpoint::{Checkpoint, Manifest, OptimizerState};
pub use config::{ModelKind, TrainConfig};
pub use loss::{segment_gradients, segment_loss, LossBreakdown, LossNodes, LossWeights};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};
pub use optim::{clip_global_norm, RmsProp, UpdateReport};
pub use rollout::{
    collect_rollouts, collect_worker, episode_seed, n_step_returns, RolloutBatch, Transition, WorkerEnv,
    WorkerRollout,
};

use crate::agent::{Agent, PlanSettings};
use crate::diffcore::{Gradients, ParamSet};
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Completed-episode window behind the headline metric.
pub const REWARD_WINDOW: usize = 1000;
/// Consecutive skipped updates after which training halts.
const MAX_CONSECUTIVE_SKIPS: u64 = 20;
const INIT_STREAM: u64 = 0x696e_6974;

/// Everything one iteration produced.
#[derive(Clone, Debug)]
pub struct IterationReport {
    pub losses: LossBreakdown,
    pub update: UpdateReport,
    pub completed: Vec<f64>,
    pub transition_calls: u64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub agent: Agent,
    pub params: ParamSet,
    pub optimizer: RmsProp,
    env_config: EnvConfig,
    envs: Vec<WorkerEnv>,
    pub iteration: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub skipped_updates: u64,
    pub transition_calls: u64,
    consecutive_skips: u64,
    recent: VecDeque<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let agent = Agent::from_config(&config);
        let params = agent.init_params(&mut stream_rng(config.seed, INIT_STREAM));
        let optimizer = RmsProp::new(&params, config.lr, config.rms_decay, config.rms_eps, config.clip_norm);
        let env_config = config.env_config();
        let envs = (0..config.workers)
            .map(|w| WorkerEnv::new(&env_config, config.seed, w))
            .collect::<Result<_>>()?;
        Ok(Self {
            agent,
            params,
            optimizer,
            env_config,
            envs,
            iteration: 0,
            env_steps: 0,
            episodes: 0,
            skipped_updates: 0,
            transition_calls: 0,
            consecutive_skips: 0,
            recent: VecDeque::with_capacity(REWARD_WINDOW),
            config,
        })
    }

    /// Continues a run. Episodes that were in progress when the checkpoint was
    /// written restart from a fresh layout.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config = ckpt.config()?;
        Self::resume(ckpt, config)
    }

    /// Like [`Trainer::from_checkpoint`] but under `config`, which may differ
    /// from the stored one in anything that leaves parameter shapes alone
    /// (typically `total_steps`).
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        let mut t = Self::new(config)?;
        ckpt.check_against(&t.params)?;
        let m = &ckpt.manifest;
        if m.episodes_started.len() != t.config.workers {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} workers, config has {}",
                m.episodes_started.len(),
                t.config.workers
            )));
        }
        t.params = ckpt.params.clone();
        if let Some(o) = &ckpt.optimizer {
            t.optimizer.steps = o.steps;
            t.optimizer.square_avg = o.square_avg.clone();
        }
        t.envs = m
            .episodes_started
            .iter()
            .enumerate()
            .map(|(w, &e)| WorkerEnv::resume(&t.env_config, t.config.seed, w, e))
            .collect::<Result<_>>()?;
        t.iteration = m.iteration;
        t.env_steps = m.env_steps;
        t.episodes = m.episodes;
        t.skipped_updates = m.skipped_updates;
        t.transition_calls = m.transition_calls;
        t.recent = m.recent_rewards.iter().copied().collect();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            manifest: Manifest {
                config: self.config.to_toml_string(),
                iteration: self.iteration,
                env_steps: self.env_steps,
                episodes: self.episodes,
                skipped_updates: self.skipped_updates,
                transition_calls: self.transition_calls,
                episodes_started: self.envs.iter().map(|e| e.episodes_started).collect(),
                recent_rewards: self.recent.iter().copied().collect(),
            },
            params: self.params.clone(),
            optimizer: Some(OptimizerState {
                steps: self.optimizer.steps,
                square_avg: self.optimizer.square_avg.clone(),
            }),
        }
    }

    pub fn settings(&self) -> PlanSettings {
        PlanSettings::from_config(&self.config)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.config.lambda,
            beta: self.config.beta,
            stop_grounding_target: self.config.stop_grounding_target,
        }
    }

    pub fn finished(&self) -> bool {
        self.env_steps >= self.config.total_steps
    }

    /// Mean of the last `n` completed episodes, if any.
    pub fn mean_recent(&self, n: usize) -> Option<f64> {
        let k = self.recent.len().min(n);
        (k > 0).then(|| self.recent.iter().rev().take(k).sum::<f64>() / k as f64)
    }

    pub fn collect(&mut self) -> Result<RolloutBatch> {
        let settings = self.settings();
        collect_rollouts(
            &self.agent,
            &self.params,
            &mut self.envs,
            &self.env_config,
            settings,
            self.config.n_step,
            self.config.seed,
            self.iteration,
            !self.config.sequential,
        )
    }

    /// Batch gradient and loss breakdown. Segments are reduced in worker
    /// order whether or not they were built in parallel.
    pub fn gradients(&self, batch: &RolloutBatch) -> Result<(Gradients, LossBreakdown)> {
        let n = batch.len();
        let (settings, weights) = (self.settings(), self.weights());
        let one = |seg: &WorkerRollout| {
            let rewards: Vec<f64> = seg.steps.iter().map(|s| s.reward).collect();
            let dones: Vec<bool> = seg.steps.iter().map(|s| s.done).collect();
            let returns = n_step_returns(&rewards, &dones, seg.bootstrap, self.config.gamma);
            segment_gradients(&self.params, &self.agent, seg, &returns, settings, weights, n)
        };
        let parts: Vec<(Gradients, LossBreakdown)> = if self.config.sequential {
            batch.workers.iter().map(one).collect::<Result<_>>()?
        } else {
            batch.workers.par_iter().map(one).collect::<Result<_>>()?
        };
        let mut parts = parts.into_iter();
        let (mut grads, mut losses) = parts.next().expect("at least one worker");
        for (g, l) in parts {
            grads.accumulate(&g);
            losses.add(&l);
        }
        Ok((grads, losses))
    }

    /// One collect → loss → update cycle.
    pub fn step(&mut self) -> Result<IterationReport> {
        let batch = self.collect()?;
        self.finish_step(batch)
    }

    /// Trains to `total_steps`, writing `metrics.jsonl`, checkpoints and,
    /// if configured, `traces.jsonl` under `out_dir`.
    pub fn run(&mut self, out_dir: &Path, append: bool) -> Result<TrainSummary> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let metrics_path = out_dir.join("metrics.jsonl");
        let mut writer = MetricsWriter::open(&metrics_path, append)?;
        let mut traces = if self.config.save_traces {
            let p = out_dir.join("traces.jsonl");
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Some((std::io::BufWriter::new(f), p))
        } else {
            None
        };
        let start = Instant::now();
        let mut pending: Vec<f64> = Vec::new();
        let mut last: Option<IterationReport> = None;

        while !self.finished() {
            let batch = self.collect()?;
            if let Some((w, p)) = traces.as_mut() {
                for s in batch.workers.iter().flat_map(|w| &w.steps) {
                    if let Some(t) = &s.trace {
                        writeln!(w, "{}", t.to_line()?).map_err(|e| Error::io(&*p, e))?;
                    }
                }
            }
            let report = self.finish_step(batch)?;
            pending.extend(&report.completed);
            let halt = self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS;
            if self.iteration % self.config.log_every == 0 || self.finished() || halt {
                writer.write(&self.record(&report, std::mem::take(&mut pending), &start))?;
            }
            if halt {
                let path = out_dir.join("checkpoint.bin");
                self.checkpoint().save(&path)?;
                return Err(Error::Numeric(format!(
                    "{} consecutive non-finite gradients at iteration {}; state saved to {}",
                    self.consecutive_skips,
                    self.iteration,
                    path.display()
                )));
            }
            if self.config.checkpoint_every > 0 && self.iteration % self.config.checkpoint_every == 0 {
                self.checkpoint().save(&out_dir.join(format!("checkpoint_{:08}.bin", self.iteration)))?;
            }
            last = Some(report);
        }
        if let Some((mut w, p)) = traces {
            w.flush().map_err(|e| Error::io(&p, e))?;
        }
        let checkpoint = out_dir.join("checkpoint.bin");
        self.checkpoint().save(&checkpoint)?;
        Ok(TrainSummary {
            iterations: self.iteration,
            env_steps: self.env_steps,
            episodes: self.episodes,
            mean_reward_100: self.mean_recent(100),
            mean_reward_1000: self.mean_recent(REWARD_WINDOW),
            last_losses: last.map(|r| r.losses),
            metrics: metrics_path,
            checkpoint,
        })
    }

    /// Loss, update and bookkeeping for an already collected batch.
    pub fn finish_step(&mut self, batch: RolloutBatch) -> Result<IterationReport> {
        let (grads, losses) = self.gradients(&batch)?;
        let update = self.optimizer.apply(&mut self.params, &grads);
        if update.applied {
            self.consecutive_skips = 0;
        } else {
            self.skipped_updates += 1;
            self.consecutive_skips += 1;
        }
        let completed: Vec<f64> = batch.completed().collect();
        for r in &completed {
            if self.recent.len() == REWARD_WINDOW {
                self.recent.pop_front();
            }
            self.recent.push_back(*r);
        }
        self.episodes += completed.len() as u64;
        self.iteration += 1;
        self.env_steps += batch.len() as u64;
        let transition_calls = batch.transition_calls();
        self.transition_calls += transition_calls;
        Ok(IterationReport {
            losses,
            update,
            completed,
            transition_calls,
        })
    }

    fn record(&self, report: &IterationReport, episode_rewards: Vec<f64>, start: &Instant) -> MetricsRecord {
        let l = &report.losses;
        MetricsRecord {
            iteration: self.iteration,
            env_steps: self.env_steps,
            episodes: self.episodes,
            env: self.config.env.to_string(),
            model: self.config.model.to_string(),
            mean_reward_1000: self.mean_recent(REWARD_WINDOW),
            mean_reward_100: self.mean_recent(100),
            episode_rewards,
            loss_policy: l.policy,
            loss_value: l.value,
            loss_inner: l.inner,
            loss_grounding: l.grounding,
            entropy_outer: l.entropy_outer,
            entropy_inner: l.entropy_inner,
            loss_total: l.total,
            grad_norm: report.update.grad_norm,
            skipped_updates: self.skipped_updates,
            transition_calls: self.transition_calls,
            wall_clock_secs: (!self.config.sequential).then(|| start.elapsed().as_secs_f64()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iterations: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub mean_reward_100: Option<f64>,
    pub mean_reward_1000: Option<f64>,
    pub last_losses: Option<LossBreakdown>,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

/// Trains from scratch into `out_dir`.
pub fn train(config: TrainConfig, out_dir: &Path) -> Result<TrainSummary> {
    Trainer::new(config)?.run(out_dir, false)
}

/// Mean episode reward of the uniform-random policy over `episodes` layouts
/// drawn from the same seed scheme as training (worker 0's episode seeds).
pub fn random_policy_baseline(env: &EnvConfig, episodes: u64, seed: u64) -> Result<f64> {
    use rand::Rng;
    let mut rng = stream_rng(seed, 0x7261_6e64);
    let mut total = 0.0;
    for e in 0..episodes {
        let mut s = crate::envs::generate(env, episode_seed(seed, 0, e))?;
        loop {
            let a = crate::envs::Action::from_index(rng.gen_range(0..crate::envs::NUM_ACTIONS)).expect("in range");
            let out = crate::envs::step(&s, a, env)?;
            total += out.reward;
            if out.done {
                break;
            }
            s = out.state;
        }
    }
    Ok(total / episodes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(model: &str) -> TrainConfig {
        let text = format!(
            "model = \"{model}\"\nenv_size = 6\nenv_goals = 1\nconv_channels = 2\nconv_layers = 1\nz_dim = 4\nh_outer = 4\nh_inner = 4\nT = 2\nworkers = 3\nn_step = 4\ntotal_steps = 240\nlog_every = 1\nsequential = true\n"
        );
        TrainConfig::from_toml_str(&text, &[]).unwrap()
    }

    #[test]
    fn step_counter_advances_by_workers_times_n_step() {
        let mut t = Trainer::new(tiny("dpn")).unwrap();
        for i in 1..=5 {
            t.step().unwrap();
            assert_eq!(t.env_steps, 12 * i);
            assert_eq!(t.transition_calls, 2 * 12 * i);
        }
    }

    #[test]
    fn baseline_never_plans_and_shares_the_schema() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for model in ["dpn", "a2c"] {
            let s = train(tiny(model), &dir.path().join(model)).unwrap();
            let r = read_metrics(&s.metrics).unwrap();
            assert_eq!(r.len(), 20);
            records.push(r);
        }
        assert!(records[1].iter().all(|r| r.transition_calls == 0 && r.loss_inner == 0.0 && r.loss_grounding == 0.0));
        assert!(records[0].last().unwrap().transition_calls > 0);
        let keys = |r: &MetricsRecord| -> Vec<String> {
            match serde_json::to_value(r).unwrap() {
                serde_json::Value::Object(m) => m.keys().cloned().collect(),
                _ => unreachable!(),
            }
        };
        assert_eq!(keys(&records[0][0]), keys(&records[1][0]));
    }

    #[test]
    fn random_baseline_is_seeded() {
        let env = TrainConfig::from_toml_str("env_size = 8\nenv_goals = 1", &[]).unwrap().env_config();
        let a = random_policy_baseline(&env, 200, 4).unwrap();
        assert_eq!(a, random_policy_baseline(&env, 200, 4).unwrap());
        assert!((-2.0..1.0).contains(&a));
    }
}
