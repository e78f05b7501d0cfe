//! Model-free actor-critic baseline: the planning network's encoder and
//! outer projection with a linear policy head straight on top, no inner
//! agent and no transition model.

use rand::Rng;

use crate::diffcore::{log_softmax, Graph, Owner, ParamSet, Value, Var};
use crate::envs::Observation;
use crate::error::Result;
use crate::model::{Encoder, ModelConfig};

#[derive(Clone, Debug)]
pub struct BaselineModel {
    cfg: ModelConfig,
    encoder: Encoder,
}

/// Outcome of one baseline decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineAct {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
}

impl BaselineModel {
    pub fn new(cfg: ModelConfig) -> Self {
        Self {
            encoder: Encoder::new(cfg.clone()),
            cfg,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let c = &self.cfg;
        let mut ps = ParamSet::new();
        self.encoder.init_params(&mut ps, rng);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        ps.insert("outer.w_zh", Owner::OuterAgent, Value::uniform(vec![c.h_outer, c.z_dim], inv(c.z_dim), rng));
        ps.insert("baseline.w_pi", Owner::OuterAgent, Value::uniform(vec![c.actions, c.h_outer], 0.1 * inv(c.h_outer), rng));
        ps.insert("outer.w_v", Owner::OuterAgent, Value::uniform(vec![c.h_outer], 0.1 * inv(c.h_outer), rng));
        ps
    }

    pub fn zero_params(&self) -> ParamSet {
        let c = &self.cfg;
        let mut ps = ParamSet::new();
        self.encoder.zero_params(&mut ps);
        ps.insert("outer.w_zh", Owner::OuterAgent, Value::zeros(vec![c.h_outer, c.z_dim]));
        ps.insert("baseline.w_pi", Owner::OuterAgent, Value::zeros(vec![c.actions, c.h_outer]));
        ps.insert("outer.w_v", Owner::OuterAgent, Value::zeros(vec![c.h_outer]));
        ps
    }

    /// Policy logits and value for an embedded state.
    pub fn heads(&self, g: &mut Graph<'_>, z: Var) -> (Var, Var) {
        let w_zh = g.param("outer.w_zh");
        let h = g.matvec(w_zh, z);
        // The planning network's acting head with no plan: W·tanh(h^O).
        let w_pi = g.param("baseline.w_pi");
        let t = g.tanh(h);
        let logits = g.matvec(w_pi, t);
        let w_v = g.param("outer.w_v");
        (logits, g.dot(w_v, h))
    }
}

/// Samples from the policy, or takes its argmax when `greedy`.
pub fn baseline_act<R: Rng + ?Sized>(
    model: &BaselineModel,
    params: &ParamSet,
    obs: &Observation,
    greedy: bool,
    rng: &mut R,
) -> Result<BaselineAct> {
    let mut g = Graph::inference(params);
    let z = model.encoder.encode(&mut g, obs)?;
    let (logits, value) = model.heads(&mut g, z);
    let lp = log_softmax(g.value(logits));
    let action = choose(&lp, greedy, rng);
    Ok(BaselineAct {
        action,
        log_prob: lp[action],
        value: g.scalar(value),
    })
}

/// Index drawn from `exp(log_probs)`, or the most likely one.
pub fn choose<R: Rng + ?Sized>(log_probs: &[f64], greedy: bool, rng: &mut R) -> usize {
    if greedy {
        return crate::diffcore::argmax(log_probs);
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::GridState;
    use crate::model::DpnModel;
    use crate::rng::stream_rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            conv_channels: 3,
            z_dim: 6,
            h_outer: 5,
            h_inner: 5,
            ..ModelConfig::new(4, 4)
        }
    }

    fn obs() -> Observation {
        let mut s = GridState::empty(4, 4, (1, 1));
        s.goals.insert((3, 2));
        s.observe()
    }

    #[test]
    fn zero_heads_are_uniform_with_zero_value() {
        let m = BaselineModel::new(cfg());
        let ps = m.zero_params();
        let mut rng = stream_rng(0, 0);
        let act = baseline_act(&m, &ps, &obs(), false, &mut rng).unwrap();
        assert!((act.log_prob - (0.25f64).ln()).abs() < 1e-12);
        assert_eq!(act.value, 0.0);
    }

    #[test]
    fn deterministic_and_log_prob_matches_softmax() {
        let m = BaselineModel::new(cfg());
        let ps = m.init_params(&mut stream_rng(1, 0));
        let a = baseline_act(&m, &ps, &obs(), false, &mut stream_rng(2, 0)).unwrap();
        let b = baseline_act(&m, &ps, &obs(), false, &mut stream_rng(2, 0)).unwrap();
        assert_eq!(a, b);

        // Independent recomputation of the logits with plain loops.
        let mut g = Graph::inference(&ps);
        let z = m.encoder().encode(&mut g, &obs()).unwrap();
        let z = g.value(z).to_vec();
        let mv = |name: &str, x: &[f64]| -> Vec<f64> {
            let w = &ps.get(name).unwrap().value;
            w.data().chunks(w.shape()[1]).map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
        };
        let h: Vec<f64> = mv("outer.w_zh", &z).iter().map(|x| x.tanh()).collect();
        let logits = mv("baseline.w_pi", &h);
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        assert!((a.log_prob - (logits[a.action] - lse)).abs() < 1e-12);
    }

    #[test]
    fn greedy_takes_argmax() {
        let lp = [0.1f64.ln(), 0.6f64.ln(), 0.2f64.ln(), 0.1f64.ln()];
        let mut rng = stream_rng(3, 0);
        assert_eq!(choose(&lp, true, &mut rng), 1);
        let mut counts = [0usize; 4];
        for _ in 0..20_000 {
            counts[choose(&lp, false, &mut rng)] += 1;
        }
        assert!((counts[1] as f64 / 20_000.0 - 0.6).abs() < 0.02);
    }

    #[test]
    fn fewer_parameters_than_the_planner() {
        let b = BaselineModel::new(cfg()).zero_params();
        let d = DpnModel::new(cfg()).zero_params();
        assert!(b.numel() < d.numel());
        for (name, p) in b.iter().filter(|(n, _)| n.starts_with("encoder")) {
            assert_eq!(p.value.shape(), d.get(name).unwrap().value.shape());
        }
    }
}
