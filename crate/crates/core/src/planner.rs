//! The T-step planning loop of the inner agent, its traces, and the
//! bookkeeping built on them (pattern classification, transition counts).

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{gumbel_noise, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{utility, DpnModel, Distance, Sampled, Triplet};

/// Which anchors the inner agent may expand.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchingMode {
    /// Free choice among previous, current and root.
    #[default]
    All,
    /// Always expand the most recent state: a forward rollout.
    Current,
    /// Always expand the root: one-step look-ahead around the real state.
    Reset,
}

impl fmt::Display for BranchingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchingMode::All => "all",
            BranchingMode::Current => "current",
            BranchingMode::Reset => "reset",
        })
    }
}

/// Triplet slot, in the order the selection logits use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Previous,
    Current,
    Root,
}

impl Anchor {
    pub const ALL: [Anchor; 3] = [Anchor::Previous, Anchor::Current, Anchor::Root];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Source of Gumbel noise for the planner's two samplers. Recording the
/// draws during collection and replaying them later rebuilds the exact same
/// plan on a fresh graph.
pub trait NoiseSource {
    fn gumbel(&mut self, k: usize) -> Vec<f64>;
}

/// Fresh draws from an RNG.
pub struct RngNoise<'a, R: Rng + ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> NoiseSource for RngNoise<'_, R> {
    fn gumbel(&mut self, k: usize) -> Vec<f64> {
        gumbel_noise(k, self.0)
    }
}

/// Fresh draws that are also kept for replay.
pub struct RecordingNoise<'a, R: Rng + ?Sized> {
    rng: &'a mut R,
    pub draws: Vec<Vec<f64>>,
}

impl<'a, R: Rng + ?Sized> RecordingNoise<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self { rng, draws: Vec::new() }
    }
}

impl<R: Rng + ?Sized> NoiseSource for RecordingNoise<'_, R> {
    fn gumbel(&mut self, k: usize) -> Vec<f64> {
        let n = gumbel_noise(k, self.rng);
        self.draws.push(n.clone());
        n
    }
}

/// Plays back recorded draws in order.
pub struct ReplayNoise<'a> {
    draws: &'a [Vec<f64>],
    next: usize,
}

impl<'a> ReplayNoise<'a> {
    pub fn new(draws: &'a [Vec<f64>]) -> Self {
        Self { draws, next: 0 }
    }

    pub fn exhausted(&self) -> bool {
        self.next == self.draws.len()
    }
}

impl NoiseSource for ReplayNoise<'_> {
    fn gumbel(&mut self, k: usize) -> Vec<f64> {
        let d = self
            .draws
            .get(self.next)
            .unwrap_or_else(|| panic!("replay ran out of noise after {} draws", self.next));
        assert_eq!(d.len(), k, "replayed draw {} has the wrong width", self.next);
        self.next += 1;
        d.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanStepRecord {
    /// 1-based planning step.
    pub step: usize,
    pub selection: Anchor,
    pub action: usize,
    pub utility: f64,
    /// `V(z_{τ+1})`.
    pub value: f64,
    /// `D[h^O(z_{τ+1}), h^O(z^c_τ)]`.
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanTrace {
    /// Free-form reference to the real state the plan started from.
    pub origin: String,
    pub horizon: usize,
    pub mode: BranchingMode,
    pub steps: Vec<PlanStepRecord>,
    pub final_hidden: Vec<f64>,
}

impl PlanTrace {
    pub fn selections(&self) -> Vec<Anchor> {
        self.steps.iter().map(|s| s.selection).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.horizon == 0 {
            return bad("trace has horizon 0".into());
        }
        if self.steps.len() != self.horizon {
            return bad(format!("trace has {} steps for horizon {}", self.steps.len(), self.horizon));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.step != i + 1 {
                return bad(format!("step {} recorded as {}", i + 1, s.step));
            }
            if ![s.utility, s.value, s.distance].iter().all(|x| x.is_finite()) {
                return bad(format!("non-finite utility at step {}", s.step));
            }
            if (s.utility - (s.value + s.distance)).abs() > 1e-6 {
                return bad(format!("utility at step {} is not value + distance", s.step));
            }
            let allowed = match self.mode {
                BranchingMode::All => true,
                BranchingMode::Current => s.selection == Anchor::Current,
                BranchingMode::Reset => s.selection == Anchor::Root,
            };
            if !allowed {
                return bad(format!("selection {:?} at step {} breaks mode {}", s.selection, s.step, self.mode));
            }
        }
        if !self.final_hidden.iter().all(|x| x.is_finite()) {
            return bad("non-finite final hidden state".into());
        }
        Ok(())
    }

    /// One JSON object, no trailing newline. Incomplete traces are refused.
    pub fn to_line(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string(self).map_err(|e| Error::InvalidInput(e.to_string()))
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        t.validate()?;
        Ok(t)
    }
}

/// Graph handles for one planning step.
#[derive(Clone, Copy, Debug)]
pub struct PlanStep {
    pub triplet: Triplet<Var>,
    /// `h^O(z^c)` fed to the inner agent at this step.
    pub h_current: Var,
    /// Inner hidden after this step's update.
    pub hidden: Var,
    /// `None` when the branching mode forced the selection.
    pub state: Option<Sampled>,
    pub selection: Anchor,
    pub z_star: Var,
    pub action: Sampled,
    pub z_next: Var,
}

#[derive(Clone, Debug)]
pub struct Plan {
    pub z0: Var,
    pub h_outer0: Var,
    pub final_hidden: Var,
    pub steps: Vec<PlanStep>,
    pub trace: PlanTrace,
    pub transition_calls: usize,
}

/// Runs `horizon` planning steps from `z0`.
pub fn plan(
    g: &mut Graph<'_>,
    model: &DpnModel,
    z0: Var,
    horizon: usize,
    mode: BranchingMode,
    metric: Distance,
    noise: &mut dyn NoiseSource,
) -> Result<Plan> {
    if horizon == 0 {
        return Err(Error::Contract("planning needs at least one step".into()));
    }
    let cfg = model.config();
    let h_outer0 = model.outer_hidden(g, z0);
    let mut triplet = Triplet::uniform(z0);
    let mut h_current = h_outer0;
    let mut hidden = g.vector(vec![0.0; cfg.h_inner]);
    let mut steps = Vec::with_capacity(horizon);
    let mut records = Vec::with_capacity(horizon);
    let mut transition_calls = 0;

    for tau in 1..=horizon {
        hidden = model.ia_update(g, hidden, &triplet, tau as f64 / horizon as f64, h_current);
        let (z_star, state, selection) = match mode {
            BranchingMode::All => {
                let n = noise.gumbel(3);
                let (z, s) = model.select_state(g, hidden, &triplet, &n)?;
                (z, Some(s), Anchor::from_index(s.index).expect("three anchors"))
            }
            BranchingMode::Current => (triplet.current, None, Anchor::Current),
            BranchingMode::Reset => (triplet.root, None, Anchor::Root),
        };
        let n = noise.gumbel(cfg.actions);
        let action = model.select_action(g, z_star, hidden, &n)?;
        let z_next = model.transition(g, z_star, action.weights, triplet.current);
        transition_calls += 1;

        let h_next = model.outer_hidden(g, z_next);
        let v_next = model.value_from_hidden(g, h_next);
        let value = g.scalar(v_next);
        let (u, distance) = utility(value, g.value(h_next), g.value(h_current), metric);
        records.push(PlanStepRecord {
            step: tau,
            selection,
            action: action.index,
            utility: u,
            value,
            distance,
        });
        steps.push(PlanStep {
            triplet,
            h_current,
            hidden,
            state,
            selection,
            z_star,
            action,
            z_next,
        });
        triplet = Triplet {
            previous: triplet.current,
            current: z_next,
            root: z0,
        };
        h_current = h_next;
    }

    let trace = PlanTrace {
        origin: String::new(),
        horizon,
        mode,
        steps: records,
        final_hidden: g.value(hidden).to_vec(),
    };
    Ok(Plan {
        z0,
        h_outer0,
        final_hidden: hidden,
        steps,
        trace,
        transition_calls,
    })
}

/// Per-step log-probabilities and entropies of the inner agent's samplers,
/// recomputed from a plan with every non-inner input detached. Gradients of
/// anything built from these reach inner-agent parameters only.
#[derive(Clone, Copy, Debug)]
pub struct InnerPolicyStep {
    /// `log p(w_τ)`, absent when the selection was forced.
    pub log_p_state: Option<Var>,
    pub log_p_action: Var,
    pub entropy_state: Option<Var>,
    pub entropy_action: Var,
}

///
/// The sampled indices come from `recorded`, the trace written when the plan
/// was first made, so a rebuilt plan is scored on the choices actually taken.
pub fn inner_policy_replay(
    g: &mut Graph<'_>,
    model: &DpnModel,
    plan: &Plan,
    recorded: &PlanTrace,
) -> Vec<InnerPolicyStep> {
    assert_eq!(plan.steps.len(), recorded.steps.len(), "trace does not belong to this plan");
    let horizon = plan.steps.len();
    let mut hidden = g.vector(vec![0.0; model.config().h_inner]);
    let mut out = Vec::with_capacity(horizon);
    for (i, (step, rec)) in plan.steps.iter().zip(&recorded.steps).enumerate() {
        let triplet = Triplet {
            previous: g.detach(step.triplet.previous),
            current: g.detach(step.triplet.current),
            root: g.detach(step.triplet.root),
        };
        let h_cur = g.detach(step.h_current);
        hidden = model.ia_update(g, hidden, &triplet, (i + 1) as f64 / horizon as f64, h_cur);
        let (log_p_state, entropy_state) = match step.state {
            Some(_) => {
                let logits = model.state_logits(g, hidden);
                let lp = g.log_softmax(logits);
                (Some(g.index(lp, rec.selection.index())), Some(g.entropy(logits)))
            }
            None => (None, None),
        };
        let z_star = g.detach(step.z_star);
        let logits = model.action_logits(g, z_star, hidden);
        let lp = g.log_softmax(logits);
        out.push(InnerPolicyStep {
            log_p_state,
            log_p_action: g.index(lp, rec.action),
            entropy_state,
            entropy_action: g.entropy(logits),
        });
    }
    out
}

/// Undiscounted utility-to-go within one plan: `G_τ = Σ_{k ≥ τ} U_k`.
pub fn utility_to_go(trace: &PlanTrace) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = trace
        .steps
        .iter()
        .rev()
        .map(|s| {
            acc += s.utility;
            acc
        })
        .collect();
    out.reverse();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    BreadthFirst,
    DepthFirst,
    Mixed,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::BreadthFirst => "breadth_first",
            Pattern::DepthFirst => "depth_first",
            Pattern::Mixed => "mixed",
        })
    }
}

/// Shape of a plan from its selections. The first selection is ignored since
/// all three anchors are the root at that point.
pub fn classify_selections(selections: &[Anchor]) -> Result<Pattern> {
    if selections.len() < 2 {
        return Err(Error::Contract(format!(
            "pattern needs at least two planning steps, got {}",
            selections.len()
        )));
    }
    let rest = &selections[1..];
    Ok(if rest.iter().all(|s| *s == Anchor::Root) {
        Pattern::BreadthFirst
    } else if rest.iter().all(|s| *s == Anchor::Current) {
        Pattern::DepthFirst
    } else {
        Pattern::Mixed
    })
}

pub fn classify_pattern(trace: &PlanTrace) -> Result<Pattern> {
    classify_selections(&trace.selections())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanningMethod {
    Dpn,
    ExhaustiveTree,
    FixedRollouts,
}

/// State transitions one decision costs under each planning scheme.
/// `depth` is T for the planning network and tree depth otherwise.
pub fn transition_count(
    method: PlanningMethod,
    actions: u64,
    depth: u64,
    rollout_length: Option<u64>,
) -> Result<u64> {
    if actions < 2 || depth < 1 {
        return Err(Error::Contract(format!("need |A| >= 2 and depth >= 1, got {actions} and {depth}")));
    }
    let overflow = || Error::InvalidInput("transition count overflows u64".into());
    match method {
        PlanningMethod::Dpn => Ok(depth),
        PlanningMethod::ExhaustiveTree => {
            let exp = u32::try_from(depth + 1).map_err(|_| overflow())?;
            let nodes = actions.checked_pow(exp).ok_or_else(overflow)?;
            Ok((nodes - 1) / (actions - 1) - 1)
        }
        PlanningMethod::FixedRollouts => {
            let l = rollout_length
                .ok_or_else(|| Error::Contract("fixed rollouts need a rollout length".into()))?;
            actions.checked_mul(l).ok_or_else(overflow)
        }
    }
}

/// Fraction of transitions saved by `ours` relative to `reference`.
pub fn reduction(ours: u64, reference: u64) -> f64 {
    1.0 - ours as f64 / reference as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamSet;
    use crate::model::ModelConfig;
    use crate::rng::stream_rng;

    fn tiny() -> DpnModel {
        DpnModel::new(ModelConfig {
            conv_channels: 2,
            z_dim: 4,
            h_outer: 4,
            h_inner: 4,
            ..ModelConfig::new(3, 3)
        })
    }

    fn matvec(ps: &ParamSet, name: &str, x: &[f64]) -> Vec<f64> {
        let w = &ps.get(name).unwrap().value;
        let cols = w.shape()[1];
        w.data().chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn run(ps: &ParamSet, m: &DpnModel, mode: BranchingMode, horizon: usize, seed: u64) -> (Vec<Vec<f64>>, PlanTrace) {
        let mut g = Graph::inference(ps);
        let z0 = g.vector(vec![0.4, -0.3, 0.2, 0.9]);
        let mut rng = stream_rng(seed, 0);
        let p = plan(&mut g, m, z0, horizon, mode, Distance::L1, &mut RngNoise(&mut rng)).unwrap();
        let sources = p.steps.iter().map(|s| g.value(s.z_star).to_vec()).collect();
        (sources, p.trace)
    }

    #[test]
    fn zero_horizon_is_rejected() {
        let m = tiny();
        let ps = m.zero_params();
        let mut g = Graph::inference(&ps);
        let z0 = g.vector(vec![0.0; 4]);
        let mut rng = stream_rng(0, 0);
        let r = plan(&mut g, &m, z0, 0, BranchingMode::All, Distance::L1, &mut RngNoise(&mut rng));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn reset_mode_always_expands_the_root() {
        let m = tiny();
        let ps = m.init_params(&mut stream_rng(1, 0));
        let (sources, trace) = run(&ps, &m, BranchingMode::Reset, 4, 3);
        for s in sources {
            assert_eq!(s, vec![0.4, -0.3, 0.2, 0.9]);
        }
        assert!(trace.selections().iter().all(|s| *s == Anchor::Root));
    }

    #[test]
    fn current_mode_chains_sources() {
        let m = tiny();
        let ps = m.init_params(&mut stream_rng(2, 0));
        let mut g = Graph::inference(&ps);
        let z0 = g.vector(vec![0.4, -0.3, 0.2, 0.9]);
        let mut rng = stream_rng(4, 0);
        let p = plan(&mut g, &m, z0, 3, BranchingMode::Current, Distance::L1, &mut RngNoise(&mut rng)).unwrap();
        assert_eq!(g.value(p.steps[0].z_star), g.value(z0));
        for w in p.steps.windows(2) {
            assert_eq!(g.value(w[1].z_star), g.value(w[0].z_next));
        }
        assert_eq!(classify_pattern(&p.trace).unwrap(), Pattern::DepthFirst);
    }

    #[test]
    fn single_step_triplet_is_degenerate() {
        let m = tiny();
        let ps = m.init_params(&mut stream_rng(3, 0));
        for seed in 0..20 {
            let (sources, trace) = run(&ps, &m, BranchingMode::All, 1, seed);
            assert_eq!(sources[0], vec![0.4, -0.3, 0.2, 0.9]);
            assert_eq!(trace.steps.len(), 1);
        }
    }

    #[test]
    fn recorded_utilities_replay() {
        let m = tiny();
        let ps = m.init_params(&mut stream_rng(5, 0));
        let mut g = Graph::inference(&ps);
        let z0 = g.vector(vec![0.1, 0.2, -0.5, 0.3]);
        let mut rng = stream_rng(6, 0);
        let mut rec = RecordingNoise::new(&mut rng);
        let p = plan(&mut g, &m, z0, 3, BranchingMode::All, Distance::L2, &mut rec).unwrap();
        let draws = rec.draws;
        assert_eq!(draws.len(), 6);

        // Independent recomputation of each utility from the recorded states.
        for (i, s) in p.steps.iter().enumerate() {
            let h_next = matvec(&ps, "outer.w_zh", g.value(s.z_next));
            let h_cur = matvec(&ps, "outer.w_zh", g.value(s.triplet.current));
            let v: f64 = ps.get("outer.w_v").unwrap().value.data().iter().zip(&h_next).map(|(a, b)| a * b).sum();
            let d = h_next.iter().zip(&h_cur).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let r = &p.trace.steps[i];
            assert!((r.value - v).abs() < 1e-12);
            assert!((r.distance - d).abs() < 1e-12);
            assert!((r.utility - r.value - r.distance).abs() < 1e-12);
        }

        let mut g2 = Graph::inference(&ps);
        let z0 = g2.vector(vec![0.1, 0.2, -0.5, 0.3]);
        let mut replay = ReplayNoise::new(&draws);
        let p2 = plan(&mut g2, &m, z0, 3, BranchingMode::All, Distance::L2, &mut replay).unwrap();
        assert!(replay.exhausted());
        assert_eq!(p.trace, p2.trace);
    }

    #[test]
    fn inner_replay_matches_plan_and_scopes_gradient() {
        let m = tiny();
        let ps = m.init_params(&mut stream_rng(7, 0));
        let mut g = Graph::with_params(&ps);
        let z0 = g.vector(vec![0.1, 0.2, -0.5, 0.3]);
        let mut rng = stream_rng(8, 0);
        let p = plan(&mut g, &m, z0, 2, BranchingMode::All, Distance::L1, &mut RngNoise(&mut rng)).unwrap();
        let steps = inner_policy_replay(&mut g, &m, &p, &p.trace);
        // The replayed logits agree with the ones sampled from.
        for (s, r) in p.steps.iter().zip(&steps) {
            let lp = crate::diffcore::log_softmax(g.value(s.action.logits));
            assert!((lp[s.action.index] - g.scalar(r.log_p_action)).abs() < 1e-12);
        }
        let mut total = g.scalar_const(0.0);
        for r in &steps {
            total = g.add(total, r.log_p_action);
            total = g.add(total, r.log_p_state.unwrap());
        }
        let grads = g.backward(total).unwrap();
        for (name, p) in ps.iter() {
            let nonzero = grads.get(name).unwrap().iter().any(|x| *x != 0.0);
            if p.owner != crate::diffcore::Owner::InnerAgent {
                assert!(!nonzero, "{name} received gradient");
            }
        }
    }

    #[test]
    fn transition_counts() {
        use PlanningMethod::*;
        assert_eq!(transition_count(ExhaustiveTree, 4, 3, None).unwrap(), 84);
        assert_eq!(transition_count(Dpn, 4, 3, None).unwrap(), 3);
        assert_eq!(transition_count(FixedRollouts, 4, 1, Some(5)).unwrap(), 20);
        assert_eq!(transition_count(ExhaustiveTree, 2, 1, None).unwrap(), 2);
        assert!((reduction(3, 84) - 0.9642857142857143).abs() < 1e-15);
        assert!(transition_count(FixedRollouts, 4, 1, None).is_err());
        assert!(transition_count(ExhaustiveTree, 1, 3, None).is_err());
        assert!(transition_count(ExhaustiveTree, 4, 200, None).is_err());
    }

    #[test]
    fn classifier_cases() {
        use Anchor::*;
        assert_eq!(classify_selections(&[Current, Root, Root]).unwrap(), Pattern::BreadthFirst);
        assert_eq!(classify_selections(&[Current, Current, Current]).unwrap(), Pattern::DepthFirst);
        assert_eq!(classify_selections(&[Current, Previous, Current]).unwrap(), Pattern::Mixed);
        assert_eq!(classify_selections(&[Root, Current]).unwrap(), Pattern::DepthFirst);
        assert!(classify_selections(&[Root]).is_err());
    }

    #[test]
    fn trace_line_round_trip_and_rejection() {
        let m = tiny();
        let ps = m.init_params(&mut stream_rng(9, 0));
        let (_, mut t) = run(&ps, &m, BranchingMode::All, 3, 1);
        t.origin = "seed 1".into();
        let line = t.to_line().unwrap();
        assert_eq!(PlanTrace::from_line(&line).unwrap(), t);
        let mut short = t.clone();
        short.steps.pop();
        assert!(short.to_line().is_err());
        let mut broken = t.clone();
        broken.steps[0].utility += 1.0;
        assert!(broken.to_line().is_err());
        assert!(PlanTrace::from_line("{not json").is_err());
    }
}
