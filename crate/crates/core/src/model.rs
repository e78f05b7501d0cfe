//! The planning network's learnable pieces: a convolutional encoder shared by
//! both agents, the feed-forward outer agent (actor-critic), the recurrent
//! inner agent that drives planning, and the residual latent transition
//! model.
//!
//! Matrices are stored `[out, in]` so every linear map is a plain `matvec`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{gumbel_softmax_with_noise, Graph, GruCell, Owner, ParamSet, Value, Var};
use crate::envs::{Observation, CHANNELS, NUM_ACTIONS};
use crate::error::{Error, Result};

/// Which latent the transition residuals are taken around.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualAnchor {
    /// `z' = z* + tanh(W z*)`, `z_next = z* + z''`.
    #[default]
    Selected,
    /// Residuals around the triplet's current state instead of the
    /// selected one.
    Current,
}

/// Distance between outer-agent hidden states used in the planning utility.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    L1,
    L2,
    Cosine,
    Kl,
}

impl Distance {
    /// `D[next, cur]`. KL is `KL(softmax(next) ‖ softmax(cur))`.
    pub fn eval(self, next: &[f64], cur: &[f64]) -> f64 {
        assert_eq!(next.len(), cur.len(), "distance between unequal lengths");
        match self {
            Distance::L1 => next.iter().zip(cur).map(|(a, b)| (a - b).abs()).sum(),
            Distance::L2 => next
                .iter()
                .zip(cur)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            Distance::Cosine => {
                let eps = 1e-8;
                let dot: f64 = next.iter().zip(cur).map(|(a, b)| a * b).sum();
                let na = next.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb = cur.iter().map(|b| b * b).sum::<f64>().sqrt();
                1.0 - dot / ((na + eps) * (nb + eps))
            }
            Distance::Kl => {
                let lp = crate::diffcore::log_softmax(next);
                let lq = crate::diffcore::log_softmax(cur);
                lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum()
            }
        }
    }
}

/// Utility of reaching a simulated state: its value plus how far the outer
/// agent's hidden state moved. Returns `(utility, distance)`; both are plain
/// numbers and never carry gradient.
pub fn utility(value_next: f64, h_next: &[f64], h_cur: &[f64], metric: Distance) -> (f64, f64) {
    let d = metric.eval(h_next, h_cur);
    (value_next + d, d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub conv_channels: usize,
    pub conv_layers: usize,
    pub z_dim: usize,
    pub h_outer: usize,
    pub h_inner: usize,
    pub actions: usize,
    pub temperature: f64,
    pub hard_gumbel: bool,
    pub residual_anchor: ResidualAnchor,
}

impl ModelConfig {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            conv_channels: 32,
            conv_layers: 2,
            z_dim: 128,
            h_outer: 128,
            h_inner: 128,
            actions: NUM_ACTIONS,
            temperature: 1.0,
            hard_gumbel: true,
            residual_anchor: ResidualAnchor::Selected,
        }
    }

    /// Width of the inner agent's context `[z^p, z^c, z^r, τ/T, h^O(z^c)]`.
    pub fn context_size(&self) -> usize {
        3 * self.z_dim + 1 + self.h_outer
    }
}

/// Convolutional trunk followed by a fully-connected layer, tanh throughout,
/// so every latent component lies in (−1, 1).
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: ModelConfig,
}

impl Encoder {
    pub fn new(cfg: ModelConfig) -> Self {
        Self { cfg }
    }

    fn conv_names(i: usize) -> (String, String) {
        (format!("encoder.conv{i}.kernel"), format!("encoder.conv{i}.bias"))
    }

    pub fn init_params<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        let c = &self.cfg;
        let mut in_ch = CHANNELS;
        for i in 0..c.conv_layers {
            let (k, b) = Self::conv_names(i);
            let bound = 1.0 / ((in_ch * 9) as f64).sqrt();
            ps.insert(k, Owner::Encoder, Value::uniform(vec![c.conv_channels, in_ch, 3, 3], bound, rng));
            ps.insert(b, Owner::Encoder, Value::uniform(vec![c.conv_channels], bound, rng));
            in_ch = c.conv_channels;
        }
        let flat = in_ch * c.height * c.width;
        let bound = 1.0 / (flat as f64).sqrt();
        ps.insert("encoder.fc.weight", Owner::Encoder, Value::uniform(vec![c.z_dim, flat], bound, rng));
        ps.insert("encoder.fc.bias", Owner::Encoder, Value::uniform(vec![c.z_dim], bound, rng));
    }

    pub fn zero_params(&self, ps: &mut ParamSet) {
        let c = &self.cfg;
        let mut in_ch = CHANNELS;
        for i in 0..c.conv_layers {
            let (k, b) = Self::conv_names(i);
            ps.insert(k, Owner::Encoder, Value::zeros(vec![c.conv_channels, in_ch, 3, 3]));
            ps.insert(b, Owner::Encoder, Value::zeros(vec![c.conv_channels]));
            in_ch = c.conv_channels;
        }
        let flat = in_ch * c.height * c.width;
        ps.insert("encoder.fc.weight", Owner::Encoder, Value::zeros(vec![c.z_dim, flat]));
        ps.insert("encoder.fc.bias", Owner::Encoder, Value::zeros(vec![c.z_dim]));
    }

    pub fn check(&self, obs: &Observation) -> Result<()> {
        if obs.height != self.cfg.height || obs.width != self.cfg.width {
            return Err(Error::Contract(format!(
                "observation is {}x{}, encoder expects {}x{}",
                obs.height, obs.width, self.cfg.height, self.cfg.width
            )));
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph<'_>, obs: &Observation) -> Result<Var> {
        self.check(obs)?;
        let x = g.constant(obs.to_value());
        Ok(self.encode_var(g, x))
    }

    /// Encoder applied to an observation already on the graph.
    pub fn encode_var(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let mut h = x;
        for i in 0..self.cfg.conv_layers {
            let (k, b) = Self::conv_names(i);
            let (k, b) = (g.param(&k), g.param(&b));
            let y = g.conv2d(h, k, b);
            h = g.tanh(y);
        }
        let flat = g.flatten(h);
        let w = g.param("encoder.fc.weight");
        let b = g.param("encoder.fc.bias");
        let z = g.affine(w, flat, b);
        g.tanh(z)
    }
}

/// The three expandable anchors of a plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet<T> {
    pub previous: T,
    pub current: T,
    pub root: T,
}

impl<T: Copy> Triplet<T> {
    pub fn uniform(x: T) -> Self {
        Self {
            previous: x,
            current: x,
            root: x,
        }
    }

    pub fn as_array(&self) -> [T; 3] {
        [self.previous, self.current, self.root]
    }

    pub fn get(&self, index: usize) -> T {
        self.as_array()[index]
    }
}

/// Result of a Gumbel selection on the graph.
#[derive(Clone, Copy, Debug)]
pub struct Sampled {
    /// Sampled weight vector (one-hot forward value when hard).
    pub weights: Var,
    pub logits: Var,
    /// Index of the largest weight.
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct DpnModel {
    cfg: ModelConfig,
    encoder: Encoder,
    cell: GruCell,
}

impl DpnModel {
    pub fn new(cfg: ModelConfig) -> Self {
        let cell = GruCell::new("inner.cell", cfg.context_size(), cfg.h_inner);
        Self {
            encoder: Encoder::new(cfg.clone()),
            cfg,
            cell,
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
        ps.insert("outer.w_hh", Owner::OuterAgent, Value::uniform(vec![c.h_outer, c.h_inner], 0.1 * inv(c.h_inner), rng));
        ps.insert("outer.w_ah", Owner::OuterAgent, Value::uniform(vec![c.actions, c.h_outer], 0.1 * inv(c.h_outer), rng));
        ps.insert("outer.w_v", Owner::OuterAgent, Value::uniform(vec![c.h_outer], 0.1 * inv(c.h_outer), rng));
        self.cell.init_params(&mut ps, Owner::InnerAgent, rng);
        ps.insert("inner.w_h3", Owner::InnerAgent, Value::uniform(vec![3, c.h_inner], inv(c.h_inner), rng));
        ps.insert(
            "inner.w_azh",
            Owner::InnerAgent,
            Value::uniform(vec![c.actions, c.z_dim + c.h_inner], inv(c.z_dim + c.h_inner), rng),
        );
        ps.insert("transition.w_zz", Owner::TransitionModel, Value::uniform(vec![c.z_dim, c.z_dim], inv(c.z_dim), rng));
        ps.insert(
            "transition.w_azz",
            Owner::TransitionModel,
            Value::uniform(vec![c.actions, c.z_dim, c.z_dim], inv(c.z_dim), rng),
        );
        ps
    }

    /// Every tensor zero; same names and shapes as [`DpnModel::init_params`].
    pub fn zero_params(&self) -> ParamSet {
        let c = &self.cfg;
        let mut ps = ParamSet::new();
        self.encoder.zero_params(&mut ps);
        ps.insert("outer.w_zh", Owner::OuterAgent, Value::zeros(vec![c.h_outer, c.z_dim]));
        ps.insert("outer.w_hh", Owner::OuterAgent, Value::zeros(vec![c.h_outer, c.h_inner]));
        ps.insert("outer.w_ah", Owner::OuterAgent, Value::zeros(vec![c.actions, c.h_outer]));
        ps.insert("outer.w_v", Owner::OuterAgent, Value::zeros(vec![c.h_outer]));
        self.cell.zero_params(&mut ps, Owner::InnerAgent);
        ps.insert("inner.w_h3", Owner::InnerAgent, Value::zeros(vec![3, c.h_inner]));
        ps.insert("inner.w_azh", Owner::InnerAgent, Value::zeros(vec![c.actions, c.z_dim + c.h_inner]));
        ps.insert("transition.w_zz", Owner::TransitionModel, Value::zeros(vec![c.z_dim, c.z_dim]));
        ps.insert("transition.w_azz", Owner::TransitionModel, Value::zeros(vec![c.actions, c.z_dim, c.z_dim]));
        ps
    }

    pub fn encode(&self, g: &mut Graph<'_>, obs: &Observation) -> Result<Var> {
        self.encoder.encode(g, obs)
    }

    /// `h^O = W^{zh} z`, no bias and no nonlinearity.
    pub fn outer_hidden(&self, g: &mut Graph<'_>, z: Var) -> Var {
        let w = g.param("outer.w_zh");
        g.matvec(w, z)
    }

    pub fn value_from_hidden(&self, g: &mut Graph<'_>, h: Var) -> Var {
        let w = g.param("outer.w_v");
        g.dot(w, h)
    }

    pub fn value(&self, g: &mut Graph<'_>, z: Var) -> Var {
        let h = self.outer_hidden(g, z);
        self.value_from_hidden(g, h)
    }

    /// One recurrent step of the inner agent over the planning context.
    pub fn ia_update(
        &self,
        g: &mut Graph<'_>,
        hidden: Var,
        triplet: &Triplet<Var>,
        step_fraction: f64,
        h_current: Var,
    ) -> Var {
        let frac = g.vector(vec![step_fraction]);
        let ctx = g.concat(&[triplet.previous, triplet.current, triplet.root, frac, h_current]);
        self.cell.forward(g, ctx, hidden)
    }

    pub fn state_logits(&self, g: &mut Graph<'_>, hidden: Var) -> Var {
        let w = g.param("inner.w_h3");
        g.matvec(w, hidden)
    }

    /// Gumbel-sampled anchor weights and `z* = w · [z^p, z^c, z^r]`.
    pub fn select_state(
        &self,
        g: &mut Graph<'_>,
        hidden: Var,
        triplet: &Triplet<Var>,
        noise: &[f64],
    ) -> Result<(Var, Sampled)> {
        let logits = self.state_logits(g, hidden);
        let weights = gumbel_softmax_with_noise(g, logits, noise, self.cfg.temperature, self.cfg.hard_gumbel)?;
        let index = crate::diffcore::argmax(g.value(weights));
        let stacked = g.stack(&triplet.as_array());
        let z_star = g.contract(weights, stacked);
        Ok((z_star, Sampled { weights, logits, index }))
    }

    pub fn action_logits(&self, g: &mut Graph<'_>, z_star: Var, hidden: Var) -> Var {
        let w = g.param("inner.w_azh");
        let x = g.concat(&[z_star, hidden]);
        g.matvec(w, x)
    }

    pub fn select_action(&self, g: &mut Graph<'_>, z_star: Var, hidden: Var, noise: &[f64]) -> Result<Sampled> {
        let logits = self.action_logits(g, z_star, hidden);
        let weights = gumbel_softmax_with_noise(g, logits, noise, self.cfg.temperature, self.cfg.hard_gumbel)?;
        let index = crate::diffcore::argmax(g.value(weights));
        Ok(Sampled { weights, logits, index })
    }

    /// Residual latent transition. `anchor` is the state the residuals are
    /// taken around; see [`ResidualAnchor`].
    pub fn transition_around(&self, g: &mut Graph<'_>, z_sel: Var, action: Var, anchor: Var) -> Var {
        let w_zz = g.param("transition.w_zz");
        let w_azz = g.param("transition.w_azz");
        let lin = g.matvec(w_zz, z_sel);
        let t1 = g.tanh(lin);
        let z1 = g.add(anchor, t1);
        let m = g.contract(action, w_azz);
        let lin2 = g.matvec(m, z1);
        let t2 = g.tanh(lin2);
        let z2 = g.add(z1, t2);
        g.add(anchor, z2)
    }

    /// Transition with the configured residual anchor; `z_current` is only
    /// read under [`ResidualAnchor::Current`].
    pub fn transition(&self, g: &mut Graph<'_>, z_sel: Var, action: Var, z_current: Var) -> Var {
        let anchor = match self.cfg.residual_anchor {
            ResidualAnchor::Selected => z_sel,
            ResidualAnchor::Current => z_current,
        };
        self.transition_around(g, z_sel, action, anchor)
    }

    /// `W^{ah} tanh(W^{hh} h^I_T + h^O_0)`.
    pub fn act_logits(&self, g: &mut Graph<'_>, h_inner: Var, h_outer0: Var) -> Var {
        let w_hh = g.param("outer.w_hh");
        let w_ah = g.param("outer.w_ah");
        let mixed = g.matvec(w_hh, h_inner);
        let pre = g.add(mixed, h_outer0);
        let t = g.tanh(pre);
        g.matvec(w_ah, t)
    }

    pub fn one_hot(&self, g: &mut Graph<'_>, action: usize) -> Var {
        let mut v = vec![0.0; self.cfg.actions];
        v[action] = 1.0;
        g.vector(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate, EnvConfig, GridState};
    use crate::rng::stream_rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            conv_channels: 3,
            z_dim: 4,
            h_outer: 4,
            h_inner: 4,
            ..ModelConfig::new(5, 5)
        }
    }

    fn obs5() -> Observation {
        let mut s = GridState::empty(5, 5, (1, 2));
        s.goals.insert((4, 4));
        s.obstacles.insert((0, 0));
        s.observe()
    }

    #[test]
    fn zero_model_encodes_to_zero() {
        let m = DpnModel::new(tiny());
        let ps = m.zero_params();
        let mut g = Graph::with_params(&ps);
        let z = m.encode(&mut g, &GridState::empty(5, 5, (0, 0)).observe()).unwrap();
        assert_eq!(g.value(z), &[0.0; 4]);
    }

    #[test]
    fn encode_is_deterministic_and_checks_shape() {
        let m = DpnModel::new(tiny());
        let ps = m.init_params(&mut stream_rng(1, 0));
        let mut g = Graph::inference(&ps);
        let a = m.encode(&mut g, &obs5()).unwrap();
        let b = m.encode(&mut g, &obs5()).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let wrong = generate(&EnvConfig::push(), 0).unwrap().observe();
        assert!(matches!(m.encode(&mut g, &wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn encoder_gradient_check() {
        let m = DpnModel::new(tiny());
        let ps = m.init_params(&mut stream_rng(2, 0));
        let obs = obs5();
        let err = crate::diffcore::grad_check(&ps, 1e-5, |g| {
            let z = m.encode(g, &obs).unwrap();
            g.sum(z)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn outer_hidden_identity_and_linearity() {
        let mut cfg = tiny();
        cfg.h_outer = cfg.z_dim;
        let m = DpnModel::new(cfg);
        let mut ps = m.zero_params();
        let w = ps.get_mut("outer.w_zh").unwrap().value.data_mut();
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        let mut g = Graph::with_params(&ps);
        let z = g.vector(vec![0.5, -1.0, 2.0, 0.25]);
        let h = m.outer_hidden(&mut g, z);
        assert_eq!(g.value(h), g.value(z));
        let zero = g.vector(vec![0.0; 4]);
        let h0 = m.outer_hidden(&mut g, zero);
        assert_eq!(g.value(h0), &[0.0; 4]);
    }

    #[test]
    fn value_is_linear_and_zero_head_is_zero() {
        let m = DpnModel::new(tiny());
        let mut ps = m.init_params(&mut stream_rng(3, 0));
        let mut g = Graph::inference(&ps);
        let z = g.vector(vec![0.3, -0.7, 1.1, 0.2]);
        let z3 = g.scale(z, -2.5);
        let v = m.value(&mut g, z);
        let v3 = m.value(&mut g, z3);
        assert!((g.scalar(v3) + 2.5 * g.scalar(v)).abs() < 1e-12);
        drop(g);
        ps.get_mut("outer.w_v").unwrap().value.data_mut().fill(0.0);
        let mut g = Graph::inference(&ps);
        let z = g.vector(vec![3.0, 1.0, -4.0, 1.0]);
        let v = m.value(&mut g, z);
        assert_eq!(g.scalar(v), 0.0);
    }

    #[test]
    fn zero_transition_doubles_the_state() {
        let m = DpnModel::new(tiny());
        let ps = m.zero_params();
        let mut g = Graph::with_params(&ps);
        let z = g.vector(vec![0.1, -0.2, 0.3, 7.0]);
        let a = m.one_hot(&mut g, 2);
        let next = m.transition(&mut g, z, a, z);
        assert_eq!(g.value(next), &[0.2, -0.4, 0.6, 14.0]);
    }

    #[test]
    fn zero_ia_gives_zero_hidden() {
        let m = DpnModel::new(tiny());
        let ps = m.zero_params();
        let mut g = Graph::with_params(&ps);
        let h = g.vector(vec![0.0; 4]);
        let z = g.vector(vec![1.0, 2.0, 3.0, 4.0]);
        let hc = g.vector(vec![0.5; 4]);
        let out = m.ia_update(&mut g, h, &Triplet::uniform(z), 0.5, hc);
        assert_eq!(g.value(out), &[0.0; 4]);
    }

    #[test]
    fn ia_distinguishes_previous_from_current() {
        let m = DpnModel::new(tiny());
        let ps = m.init_params(&mut stream_rng(5, 0));
        let mut g = Graph::inference(&ps);
        let h = g.vector(vec![0.1, 0.0, -0.1, 0.2]);
        let zp = g.vector(vec![1.0, 0.0, 0.5, -0.5]);
        let zc = g.vector(vec![-0.3, 0.8, 0.1, 0.0]);
        let zr = g.vector(vec![0.2, 0.2, 0.2, 0.2]);
        let hc = g.vector(vec![0.1; 4]);
        let a = m.ia_update(&mut g, h, &Triplet { previous: zp, current: zc, root: zr }, 0.5, hc);
        let b = m.ia_update(&mut g, h, &Triplet { previous: zc, current: zp, root: zr }, 0.5, hc);
        assert_ne!(g.value(a), g.value(b));
    }

    #[test]
    fn act_logits_zero_cases() {
        let m = DpnModel::new(tiny());
        let ps = m.zero_params();
        let mut g = Graph::with_params(&ps);
        let hi = g.vector(vec![0.0; 4]);
        let ho = g.vector(vec![0.0; 4]);
        let l = m.act_logits(&mut g, hi, ho);
        assert_eq!(g.value(l), &[0.0; 4]);
    }

    #[test]
    fn selection_picks_anchor_in_triplet_order() {
        let m = DpnModel::new(tiny());
        let ps = m.zero_params();
        let mut g = Graph::with_params(&ps);
        let h = g.vector(vec![0.0; 4]);
        let zs: Vec<Var> = (0..3).map(|i| g.vector(vec![i as f64; 4])).collect();
        let t = Triplet {
            previous: zs[0],
            current: zs[1],
            root: zs[2],
        };
        // Zero logits: the noise alone decides.
        for (winner, noise) in [(0, [5.0, 0.0, 0.0]), (1, [0.0, 5.0, 0.0]), (2, [0.0, 0.0, 5.0])] {
            let (z, s) = m.select_state(&mut g, h, &t, &noise).unwrap();
            assert_eq!(s.index, winner);
            assert_eq!(g.value(z), g.value(zs[winner]));
        }
    }

    #[test]
    fn distance_metrics() {
        let a = [0.5, 1.0, -1.0, 0.0];
        let b = [0.0, 0.5, -0.5, 0.5];
        assert_eq!(Distance::L1.eval(&a, &b), 2.0);
        assert!((Distance::L2.eval(&a, &b) - 1.0).abs() < 1e-12);
        assert!(Distance::Cosine.eval(&a, &a).abs() < 1e-7);
        assert!(Distance::Kl.eval(&a, &a).abs() < 1e-15);
        assert!(Distance::Kl.eval(&a, &b) > 0.0);
        assert_ne!(Distance::Kl.eval(&a, &b), Distance::Kl.eval(&b, &a));
        let (u, d) = utility(0.0, &a, &b, Distance::L1);
        assert_eq!((u, d), (2.0, 2.0));
        let (u, _) = utility(0.7, &a, &a, Distance::L2);
        assert_eq!(u, 0.7);
    }
}
