//! Flat TOML run configuration. Every key has a default, unknown keys are
//! rejected, and `key=value` overrides are applied on top of the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::{EnvConfig, EnvKind};
use crate::error::{Error, Result};
use crate::model::{Distance, ModelConfig, ResidualAnchor};
use crate::planner::BranchingMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Dpn,
    /// Shared-encoder actor-critic without planning.
    A2c,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Dpn => "dpn",
            ModelKind::A2c => "a2c",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub env: EnvKind,
    /// Environment overrides; unset keys keep the environment's defaults.
    pub env_size: Option<usize>,
    pub env_goals: Option<usize>,
    pub env_boxes: Option<usize>,
    pub env_obstacles: Option<usize>,
    pub obstacle_density: Option<f64>,
    pub step_limit: Option<usize>,

    pub seed: u64,
    pub workers: usize,
    pub n_step: usize,
    pub total_steps: u64,
    pub gamma: f64,
    /// Weight of the state-grounding loss.
    pub lambda: f64,
    /// Entropy bonus weight, shared by every policy.
    pub beta: f64,
    pub lr: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Stop the gradient into the encoder branch of the grounding target.
    pub stop_grounding_target: bool,
    /// Run collection and loss assembly on the calling thread only.
    pub sequential: bool,

    /// Planning steps per decision.
    #[serde(rename = "T")]
    pub plan_steps: usize,
    pub metric: Distance,
    pub branching: BranchingMode,

    pub conv_channels: usize,
    pub conv_layers: usize,
    pub z_dim: usize,
    pub h_outer: usize,
    pub h_inner: usize,
    pub temperature: f64,
    pub hard_gumbel: bool,
    pub residual_anchor: ResidualAnchor,

    /// Iterations between metrics records.
    pub log_every: u64,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Also write every plan trace of the run to `traces.jsonl`.
    pub save_traces: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Dpn,
            env: EnvKind::Gridworld,
            env_size: None,
            env_goals: None,
            env_boxes: None,
            env_obstacles: None,
            obstacle_density: None,
            step_limit: None,
            seed: 0,
            workers: 16,
            n_step: 5,
            total_steps: 1_000_000,
            gamma: 0.99,
            lambda: 1.0,
            beta: 0.01,
            lr: 7e-4,
            rms_decay: 0.99,
            rms_eps: 1e-5,
            clip_norm: 0.5,
            stop_grounding_target: false,
            sequential: false,
            plan_steps: 3,
            metric: Distance::L1,
            branching: BranchingMode::All,
            conv_channels: 32,
            conv_layers: 2,
            z_dim: 128,
            h_outer: 128,
            h_inner: 128,
            temperature: 1.0,
            hard_gumbel: true,
            residual_anchor: ResidualAnchor::Selected,
            log_every: 10,
            checkpoint_every: 0,
            save_traces: false,
        }
    }
}

impl TrainConfig {
    /// Parses a config document, then applies `key=value` overrides in
    /// order. Override values use TOML syntax; bare words are read as
    /// strings, so `metric=kl` works as well as `metric="kl"`.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let known = Self::known_keys();
        for key in table.keys() {
            if !known.contains(key) {
                return Err(Error::UnknownKey(key.clone()));
            }
        }
        for o in overrides {
            let (k, v) = parse_override(o)?;
            if !known.contains(&k) {
                return Err(Error::UnknownKey(k));
            }
            table.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Every accepted key, including the optional environment overrides.
    pub fn known_keys() -> Vec<String> {
        let mut keys: Vec<String> = match toml::Value::try_from(Self::default()).expect("config serialises") {
            toml::Value::Table(t) => t.keys().cloned().collect(),
            _ => unreachable!("config is a table"),
        };
        for k in ["env_size", "env_goals", "env_boxes", "env_obstacles", "obstacle_density", "step_limit"] {
            if !keys.iter().any(|x| x == k) {
                keys.push(k.to_string());
            }
        }
        keys
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.n_step == 0 {
            return bad("n_step must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0 && self.beta >= 0.0) {
            return bad("lambda and beta must be non-negative");
        }
        if !(self.lr > 0.0 && self.rms_eps > 0.0 && (0.0..1.0).contains(&self.rms_decay)) {
            return bad("lr and rms_eps must be positive and rms_decay in [0, 1)");
        }
        if self.clip_norm < 0.0 {
            return bad("clip_norm must be non-negative");
        }
        if self.model == ModelKind::Dpn && self.plan_steps == 0 {
            return bad("T must be at least 1 for the planning model");
        }
        if self.conv_layers == 0 || self.conv_channels == 0 || self.z_dim == 0 || self.h_outer == 0 || self.h_inner == 0 {
            return bad("network sizes must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        self.env_config().validate()
    }

    pub fn env_config(&self) -> EnvConfig {
        let mut c = EnvConfig::for_kind(self.env);
        if let Some(v) = self.env_size {
            c.size = v;
        }
        if let Some(v) = self.env_goals {
            c.goals = v;
        }
        if let Some(v) = self.env_boxes {
            c.boxes = v;
        }
        if let Some(v) = self.env_obstacles {
            c.obstacles = v;
        }
        if let Some(v) = self.obstacle_density {
            c.obstacle_density = v;
        }
        if let Some(v) = self.step_limit {
            c.step_limit = v;
        }
        c
    }

    pub fn model_config(&self) -> ModelConfig {
        let env = self.env_config();
        ModelConfig {
            conv_channels: self.conv_channels,
            conv_layers: self.conv_layers,
            z_dim: self.z_dim,
            h_outer: self.h_outer,
            h_inner: self.h_inner,
            temperature: self.temperature,
            hard_gumbel: self.hard_gumbel,
            residual_anchor: self.residual_anchor,
            ..ModelConfig::new(env.size, env.size)
        }
    }

    /// Planning steps actually run per decision; the baseline never plans.
    pub fn horizon(&self) -> usize {
        match self.model {
            ModelKind::Dpn => self.plan_steps,
            ModelKind::A2c => 0,
        }
    }

    /// Environment steps taken by one iteration across all workers.
    pub fn steps_per_iteration(&self) -> u64 {
        (self.workers * self.n_step) as u64
    }
}

fn parse_override(spec: &str) -> Result<(String, toml::Value)> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let value = match format!("x = {v}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").expect("parsed key"),
        Err(_) => toml::Value::String(v.to_string()),
    };
    Ok((k.to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(TrainConfig::from_toml_str("", &[]).unwrap(), TrainConfig::default());
    }

    #[test]
    fn round_trip_through_toml() {
        let mut c = TrainConfig::default();
        c.env_size = Some(8);
        c.metric = Distance::Kl;
        c.branching = BranchingMode::Reset;
        let back = TrainConfig::from_toml_str(&c.to_toml_string(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply_in_order() {
        let ov: Vec<String> = ["T=2", "metric=kl", "branching=\"current\"", "lr=1e-3", "T=1", "env_size=8"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let c = TrainConfig::from_toml_str("workers = 4\n", &ov).unwrap();
        assert_eq!((c.plan_steps, c.workers, c.env_size), (1, 4, Some(8)));
        assert_eq!(c.metric, Distance::Kl);
        assert_eq!(c.branching, BranchingMode::Current);
        assert_eq!(c.lr, 1e-3);
    }

    #[test]
    fn unknown_keys_name_the_key() {
        let e = TrainConfig::from_toml_str("lerning_rate = 0.1\n", &[]).unwrap_err();
        assert!(matches!(&e, Error::UnknownKey(k) if k == "lerning_rate"));
        let e = TrainConfig::from_toml_str("", &["gama=0.9".into()]).unwrap_err();
        assert!(e.to_string().contains("gama"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for o in ["workers=0", "gamma=0", "gamma=1.5", "beta=-1", "T=0", "metric=chebyshev", "env_size=1", "noeq"] {
            assert!(TrainConfig::from_toml_str("", &[o.to_string()]).is_err(), "{o}");
        }
        // The baseline does not plan, so T is irrelevant to it.
        assert!(TrainConfig::from_toml_str("model = \"a2c\"\nT = 0\n", &[]).is_ok());
    }

    #[test]
    fn derived_configs() {
        let c = TrainConfig::from_toml_str("env = \"push\"\nstep_limit = 10\n", &[]).unwrap();
        assert_eq!(c.env_config().step_limit, 10);
        assert_eq!(c.env_config().boxes, 12);
        assert_eq!(c.model_config().height, 8);
        assert_eq!(c.steps_per_iteration(), 80);
    }
}
