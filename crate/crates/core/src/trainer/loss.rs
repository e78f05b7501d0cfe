//! Loss assembly for one worker segment. Collection-time quantities (value
//! estimates, planning utilities, sampled indices, Gumbel draws) enter as
//! constants, so every stop-gradient in the objective is structural.

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, PlanSettings};
use crate::diffcore::{Gradients, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::planner::{inner_policy_replay, utility_to_go, ReplayNoise};

use super::rollout::WorkerRollout;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub policy: f64,
    pub value: f64,
    pub inner: f64,
    pub grounding: f64,
    pub entropy_outer: f64,
    pub entropy_inner: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Total as the weighted sum of its parts.
    pub fn recompose(&self, lambda: f64, beta: f64) -> f64 {
        self.policy + self.value + self.inner + lambda * self.grounding - beta * (self.entropy_outer + self.entropy_inner)
    }

    pub fn add(&mut self, o: &LossBreakdown) {
        self.policy += o.policy;
        self.value += o.value;
        self.inner += o.inner;
        self.grounding += o.grounding;
        self.entropy_outer += o.entropy_outer;
        self.entropy_inner += o.entropy_inner;
        self.total += o.total;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub stop_grounding_target: bool,
}

/// Graph handles of every term; all are already divided by the batch size.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub policy: Var,
    pub value: Var,
    pub inner: Var,
    pub grounding: Var,
    pub entropy_outer: Var,
    pub entropy_inner: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph<'_>) -> LossBreakdown {
        LossBreakdown {
            policy: g.scalar(self.policy),
            value: g.scalar(self.value),
            inner: g.scalar(self.inner),
            grounding: g.scalar(self.grounding),
            entropy_outer: g.scalar(self.entropy_outer),
            entropy_inner: g.scalar(self.entropy_inner),
            total: g.scalar(self.total),
        }
    }
}

/// Builds every loss term for one worker segment. `returns` are the
/// segment's n-step targets and `batch_size` the number of transitions in
/// the whole batch, so summing segment losses gives batch means.
pub fn segment_loss(
    g: &mut Graph<'_>,
    agent: &Agent,
    segment: &WorkerRollout,
    returns: &[f64],
    settings: PlanSettings,
    weights: LossWeights,
    batch_size: usize,
) -> Result<LossNodes> {
    assert_eq!(returns.len(), segment.steps.len(), "one return per step");
    let inv_n = 1.0 / batch_size as f64;
    let mut policy_terms = Vec::new();
    let mut value_terms = Vec::new();
    let mut entropy_terms = Vec::new();
    let mut inner_terms = Vec::new();
    let mut inner_entropy_terms = Vec::new();
    let mut grounding_terms = Vec::new();

    let z: Vec<Var> = segment
        .steps
        .iter()
        .map(|s| agent.encode(g, &s.obs))
        .collect::<Result<_>>()?;

    for (t, step) in segment.steps.iter().enumerate() {
        let mut noise = ReplayNoise::new(&step.noise);
        let d = agent.decide(g, z[t], settings, &mut noise)?;
        if !noise.exhausted() {
            return Err(Error::Contract("replayed plan consumed fewer draws than recorded".into()));
        }

        // Outer actor-critic. The advantage uses the stored estimate.
        let lp = g.log_softmax(d.logits);
        let lp_a = g.index(lp, step.action);
        let adv = returns[t] - step.value;
        policy_terms.push(g.scale(lp_a, -adv * inv_n));
        let target = g.scalar_const(returns[t]);
        let err = g.sub(target, d.value);
        let sq = g.mul(err, err);
        value_terms.push(g.scale(sq, inv_n));
        let h = g.entropy(d.logits);
        entropy_terms.push(g.scale(h, inv_n));

        if let (Agent::Dpn(model), Some(plan)) = (agent, &d.plan) {
            let trace = step
                .trace
                .as_ref()
                .ok_or_else(|| Error::Contract("planning step without a recorded trace".into()))?;
            let per_step = inner_policy_replay(g, model, plan, trace);
            let to_go = utility_to_go(trace);
            let inv_nt = inv_n / per_step.len() as f64;
            for (s, big_g) in per_step.iter().zip(&to_go) {
                let mut lp = s.log_p_action;
                if let Some(ls) = s.log_p_state {
                    lp = g.add(lp, ls);
                }
                inner_terms.push(g.scale(lp, -big_g * inv_nt));
                let mut h = s.entropy_action;
                if let Some(hs) = s.entropy_state {
                    h = g.add(h, hs);
                }
                inner_entropy_terms.push(g.scale(h, inv_nt));
            }

            // Grounding: the model's prediction against the next embedding.
            let a = model.one_hot(g, step.action);
            let pred = model.transition(g, z[t], a, z[t]);
            let next = if !step.done && t + 1 < z.len() {
                z[t + 1]
            } else {
                agent.encode(g, &step.next_obs)?
            };
            let target = if weights.stop_grounding_target { g.detach(next) } else { next };
            let hub = g.huber(pred, target, 1.0);
            let m = g.mean(hub);
            grounding_terms.push(g.scale(m, inv_n));
        }
    }

    let policy = sum_all(g, &policy_terms);
    let value = sum_all(g, &value_terms);
    let inner = sum_all(g, &inner_terms);
    let grounding = sum_all(g, &grounding_terms);
    let entropy_outer = sum_all(g, &entropy_terms);
    let entropy_inner = sum_all(g, &inner_entropy_terms);

    let outer = g.add(policy, value);
    let mut total = g.add(outer, inner);
    if weights.lambda != 0.0 {
        let lz = g.scale(grounding, weights.lambda);
        total = g.add(total, lz);
    }
    if weights.beta != 0.0 {
        let h = g.add(entropy_outer, entropy_inner);
        let bh = g.scale(h, -weights.beta);
        total = g.add(total, bh);
    }
    Ok(LossNodes {
        policy,
        value,
        inner,
        grounding,
        entropy_outer,
        entropy_inner,
        total,
    })
}

fn sum_all(g: &mut Graph<'_>, terms: &[Var]) -> Var {
    match terms.split_first() {
        None => g.scalar_const(0.0),
        Some((first, rest)) => rest.iter().fold(*first, |acc, t| g.add(acc, *t)),
    }
}

/// Gradient of the total loss of one segment, plus its breakdown.
pub fn segment_gradients(
    params: &ParamSet,
    agent: &Agent,
    segment: &WorkerRollout,
    returns: &[f64],
    settings: PlanSettings,
    weights: LossWeights,
    batch_size: usize,
) -> Result<(Gradients, LossBreakdown)> {
    let mut g = Graph::with_params(params);
    let nodes = segment_loss(&mut g, agent, segment, returns, settings, weights, batch_size)?;
    let grads = g.backward(nodes.total)?;
    Ok((grads, nodes.breakdown(&g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, Owner};
    use crate::trainer::{n_step_returns, TrainConfig, Trainer};

    fn trainer(extra: &str) -> Trainer {
        let text = format!(
            "env_size = 5\nenv_goals = 1\nconv_channels = 2\nconv_layers = 1\nz_dim = 4\nh_outer = 4\nh_inner = 4\nT = 2\nworkers = 2\nn_step = 3\nsequential = true\n{extra}"
        );
        Trainer::new(TrainConfig::from_toml_str(&text, &[]).unwrap()).unwrap()
    }

    fn returns(t: &Trainer, seg: &WorkerRollout) -> Vec<f64> {
        let r: Vec<f64> = seg.steps.iter().map(|s| s.reward).collect();
        let d: Vec<bool> = seg.steps.iter().map(|s| s.done).collect();
        n_step_returns(&r, &d, seg.bootstrap, t.config.gamma)
    }

    fn losses(t: &Trainer, seg: &WorkerRollout, weights: LossWeights) -> LossBreakdown {
        let mut g = Graph::inference(&t.params);
        let r = returns(t, seg);
        segment_loss(&mut g, &t.agent, seg, &r, t.settings(), weights, seg.steps.len())
            .unwrap()
            .breakdown(&g)
    }

    #[test]
    fn silent_plan_reduces_to_the_baseline() {
        // With W^{hh} = 0 the plan cannot reach the acting head, so the
        // outer losses and their gradients must match A2C with copied weights.
        let mut t = trainer("lambda = 0.0\nbeta = 0.0");
        t.params.get_mut("outer.w_hh").unwrap().value.data_mut().fill(0.0);
        let b = t.collect().unwrap();
        let a2c = trainer("model = \"a2c\"");
        let mut params = a2c.params.clone();
        for (name, p) in params.iter_mut() {
            let src = if name == "baseline.w_pi" { "outer.w_ah" } else { name };
            p.value = t.params.get(src).unwrap().value.clone();
        }
        for seg in &b.workers {
            let r = returns(&t, seg);
            let mut plain = seg.clone();
            for s in &mut plain.steps {
                s.noise.clear();
                s.trace = None;
            }
            let mut g = Graph::with_params(&t.params);
            let n = segment_loss(&mut g, &t.agent, seg, &r, t.settings(), t.weights(), 3).unwrap();
            let outer = g.add(n.policy, n.value);
            let grads = g.backward(outer).unwrap();
            let mut g2 = Graph::with_params(&params);
            let n2 = segment_loss(&mut g2, &a2c.agent, &plain, &r, a2c.settings(), a2c.weights(), 3).unwrap();
            let outer2 = g2.add(n2.policy, n2.value);
            assert!((g.scalar(outer) - g2.scalar(outer2)).abs() < 1e-12);
            let base = g2.backward(outer2).unwrap();
            for (name, gb) in base.iter() {
                let src = if name == "baseline.w_pi" { "outer.w_ah" } else { name };
                for (x, y) in grads.get(src).unwrap().iter().zip(gb) {
                    assert!((x - y).abs() < 1e-12, "{name}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn total_recomposes_from_parts() {
        let mut t = trainer("");
        let b = t.collect().unwrap();
        for (lambda, beta) in [(1.0, 0.01), (0.3, 0.5), (0.0, 0.0)] {
            let w = LossWeights {
                lambda,
                beta,
                stop_grounding_target: false,
            };
            let l = losses(&t, &b.workers[0], w);
            assert!((l.total - l.recompose(lambda, beta)).abs() < 1e-9);
        }
        t.step().unwrap();
    }

    #[test]
    fn zero_lambda_drops_grounding_from_the_gradient() {
        let mut t = trainer("lambda = 0.0\nbeta = 0.0");
        let b = t.collect().unwrap();
        let seg = &b.workers[1];
        let r = returns(&t, seg);
        let mut g = Graph::with_params(&t.params);
        let nodes = segment_loss(&mut g, &t.agent, seg, &r, t.settings(), t.weights(), 3).unwrap();
        assert!(g.scalar(nodes.grounding) > 0.0);
        let total = g.backward(nodes.total).unwrap();
        let mut g2 = Graph::with_params(&t.params);
        let n2 = segment_loss(&mut g2, &t.agent, seg, &r, t.settings(), t.weights(), 3).unwrap();
        let outer = g2.add(n2.policy, n2.value);
        let root = g2.add(outer, n2.inner);
        let parts = g2.backward(root).unwrap();
        for ((_, a), (_, b)) in total.iter().zip(parts.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_utilities_give_zero_inner_loss() {
        let mut t = trainer("");
        let mut b = t.collect().unwrap();
        for s in b.workers.iter_mut().flat_map(|w| &mut w.steps) {
            for r in &mut s.trace.as_mut().unwrap().steps {
                (r.utility, r.value, r.distance) = (0.0, 0.0, 0.0);
            }
        }
        for seg in &b.workers {
            assert_eq!(losses(&t, seg, t.weights()).inner, 0.0);
        }
    }

    #[test]
    fn inner_terms_touch_only_inner_parameters() {
        let mut t = trainer("");
        for _ in 0..3 {
            let b = t.collect().unwrap();
            for seg in &b.workers {
                let r = returns(&t, seg);
                let mut g = Graph::with_params(&t.params);
                let nodes = segment_loss(&mut g, &t.agent, seg, &r, t.settings(), t.weights(), 6).unwrap();
                let root = g.add(nodes.inner, nodes.entropy_inner);
                let grads = g.backward(root).unwrap();
                let mut inner_nonzero = false;
                for (i, (name, p)) in t.params.iter().enumerate() {
                    if p.owner == Owner::InnerAgent {
                        inner_nonzero |= grads.buffer(i).iter().any(|x| *x != 0.0);
                    } else {
                        assert!(grads.buffer(i).iter().all(|x| *x == 0.0), "{name} leaked");
                    }
                }
                assert!(inner_nonzero);
            }
            t.finish_step(b).unwrap();
        }
    }

    #[test]
    fn baseline_loss_is_plain_actor_critic() {
        let mut t = trainer("model = \"a2c\"");
        let b = t.collect().unwrap();
        for seg in &b.workers {
            let r = returns(&t, seg);
            let l = losses(&t, seg, t.weights());
            let n = seg.steps.len() as f64;
            let policy: f64 = seg.steps.iter().zip(&r).map(|(s, r)| -(r - s.value) * s.log_prob).sum::<f64>() / n;
            let value: f64 = seg.steps.iter().zip(&r).map(|(s, r)| (r - s.value).powi(2)).sum::<f64>() / n;
            assert!((l.policy - policy).abs() < 1e-12);
            assert!((l.value - value).abs() < 1e-12);
            assert_eq!((l.inner, l.grounding, l.entropy_inner), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn full_loss_matches_finite_differences() {
        let mut t = trainer("hard_gumbel = false\nlambda = 0.7\nbeta = 0.05");
        let b = t.collect().unwrap();
        let (agent, settings, weights) = (t.agent.clone(), t.settings(), t.weights());
        for seg in &b.workers {
            let r = returns(&t, seg);
            let worst = grad_check(&t.params, 1e-5, |g| {
                segment_loss(g, &agent, seg, &r, settings, weights, 6).unwrap().total
            })
            .unwrap();
            assert!(worst < 1e-3, "worst relative error {worst}");
        }
        t.finish_step(b).unwrap();
    }
}
