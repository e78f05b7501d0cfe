//! Gated recurrent cell.
//!
//! ```text
//! r  = σ(W_r x + U_r h + b_r)
//! u  = σ(W_u x + U_u h + b_u)
//! n  = tanh(W_n x + b_n + r ⊙ (U_n h))
//! h' = n + u ⊙ (h − n)
//! ```
//!
//! `h'` is a convex combination of `n` and `h`, so a hidden state that starts
//! in (−1, 1) stays there.

use rand::Rng;

use super::graph::{Graph, Var};
use super::value::{Owner, ParamSet, Value};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GruCell {
    prefix: String,
    input: usize,
    hidden: usize,
}

const GATES: [&str; 3] = ["r", "u", "n"];

impl GruCell {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn name(&self, kind: &str, gate: &str) -> String {
        format!("{}.{kind}_{gate}", self.prefix)
    }

    /// Registers the nine cell tensors under `owner`, uniform in
    /// `±1/sqrt(hidden)`.
    pub fn init_params<R: Rng + ?Sized>(&self, params: &mut ParamSet, owner: Owner, rng: &mut R) {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        for gate in GATES {
            params.insert(
                self.name("w", gate),
                owner,
                Value::uniform(vec![self.hidden, self.input], bound, rng),
            );
            params.insert(
                self.name("u", gate),
                owner,
                Value::uniform(vec![self.hidden, self.hidden], bound, rng),
            );
            params.insert(
                self.name("b", gate),
                owner,
                Value::uniform(vec![self.hidden], bound, rng),
            );
        }
    }

    pub fn zero_params(&self, params: &mut ParamSet, owner: Owner) {
        for gate in GATES {
            params.insert(self.name("w", gate), owner, Value::zeros(vec![self.hidden, self.input]));
            params.insert(self.name("u", gate), owner, Value::zeros(vec![self.hidden, self.hidden]));
            params.insert(self.name("b", gate), owner, Value::zeros(vec![self.hidden]));
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        GATES
            .iter()
            .flat_map(|g| ["w", "u", "b"].map(|k| self.name(k, g)))
            .collect()
    }

    /// One step on the graph. Panics on dimension mismatch.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, h: Var) -> Var {
        assert_eq!(g.shape(x), [self.input], "recurrent cell input size");
        assert_eq!(g.shape(h), [self.hidden], "recurrent cell hidden size");
        let gate = |g: &mut Graph<'_>, name: &str| {
            let w = g.param(&self.name("w", name));
            let u = g.param(&self.name("u", name));
            let b = g.param(&self.name("b", name));
            let wx = g.affine(w, x, b);
            let uh = g.matvec(u, h);
            let pre = g.add(wx, uh);
            g.sigmoid(pre)
        };
        let r = gate(g, "r");
        let u = gate(g, "u");
        let wn = g.param(&self.name("w", "n"));
        let un = g.param(&self.name("u", "n"));
        let bn = g.param(&self.name("b", "n"));
        let wx = g.affine(wn, x, bn);
        let uh = g.matvec(un, h);
        let gated = g.mul(r, uh);
        let pre = g.add(wx, gated);
        let n = g.tanh(pre);
        let diff = g.sub(h, n);
        let keep = g.mul(u, diff);
        g.add(n, keep)
    }

    /// Plain-vector step for callers outside a graph.
    pub fn step(&self, params: &ParamSet, input: &[f64], hidden: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input || hidden.len() != self.hidden {
            return Err(Error::Contract(format!(
                "recurrent cell expects input {} / hidden {}, got {} / {}",
                self.input,
                self.hidden,
                input.len(),
                hidden.len()
            )));
        }
        for name in self.param_names() {
            if params.get(&name).is_none() {
                return Err(Error::Contract(format!("missing parameter {name}")));
            }
        }
        let mut g = Graph::inference(params);
        let x = g.vector(input.to_vec());
        let h = g.vector(hidden.to_vec());
        let out = self.forward(&mut g, x, h);
        Ok(g.value(out).to_vec())
    }
}
