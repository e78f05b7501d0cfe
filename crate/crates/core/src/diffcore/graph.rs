//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! A [`Graph`] records every primitive applied during the forward pass in
//! evaluation order. Because nodes only ever reference earlier nodes, the
//! tape is already topologically sorted and `backward` is a single reverse
//! sweep. Parameters are borrowed from a [`ParamSet`] rather than copied, and
//! each parameter maps to exactly one leaf per graph so its gradient
//! accumulates across every use.

use std::collections::HashMap;

use super::value::{Gradients, ParamSet, Value};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Contract(Var, Var),
    Conv2d { input: Var, kernel: Var, bias: Var },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Index(Var, usize),
    Huber { pred: Var, target: Var, delta: f64 },
    StraightThrough(Var),
}

enum Data<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

struct Node<'p> {
    op: Op,
    shape: Vec<usize>,
    data: Data<'p>,
    needs_grad: bool,
}

impl Node<'_> {
    fn data(&self) -> &[f64] {
        match &self.data {
            Data::Owned(v) => v,
            Data::Borrowed(v) => v,
        }
    }
}

pub struct Graph<'p> {
    params: Option<&'p ParamSet>,
    nodes: Vec<Node<'p>>,
    param_leaves: HashMap<usize, Var>,
    track: bool,
    /// Every value that went through `detach`, in call order.
    detached: Vec<Value>,
    /// Replacements for `detach` results, consumed in call order.
    frozen: Vec<Value>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph with no parameter set; only constants and leaves.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            track: true,
            detached: Vec::new(),
            frozen: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamSet) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Forward-only graph: parameter leaves do not request gradients, so no
    /// node does.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self {
            params: Some(params),
            track: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let d = self.value(v);
        assert_eq!(d.len(), 1, "not a scalar node");
        d[0]
    }

    pub fn to_value(&self, v: Var) -> Value {
        Value::new(self.shape(v).to_vec(), self.value(v).to_vec())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, parents: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            shape,
            data: Data::Owned(data),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input. Receives no gradient.
    pub fn constant(&mut self, value: Value) -> Var {
        let (shape, data) = (value.shape().to_vec(), value.into_data());
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            data: Data::Owned(data),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Var {
        self.constant(Value::vector(data))
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Value::scalar(x))
    }

    /// Copy of `v`'s current value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let mut value = self.to_value(v);
        if let Some(f) = self.frozen.get(self.detached.len()) {
            assert_eq!(f.shape(), value.shape(), "frozen value {} has the wrong shape", self.detached.len());
            value = f.clone();
        }
        self.detached.push(value.clone());
        self.constant(value)
    }

    /// Values produced by `detach` so far, in call order.
    pub fn detached_values(&self) -> &[Value] {
        &self.detached
    }

    /// Makes the first `values.len()` calls to `detach` return these values
    /// instead of their inputs. Used to evaluate a surrogate objective with
    /// its stop-gradient terms held at a reference point.
    pub fn freeze_detached(mut self, values: Vec<Value>) -> Self {
        self.frozen = values;
        self
    }

    /// Leaf for a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Var {
        let params = self.params.expect("graph was built without a parameter set");
        let index = params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(&v) = self.param_leaves.get(&index) {
            return v;
        }
        let value = &params.by_index(index).1.value;
        self.nodes.push(Node {
            op: Op::Param,
            shape: value.shape().to_vec(),
            data: Data::Borrowed(value.data()),
            needs_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(index, v);
        v
    }

    /// `w · x` for `w: [m, n]`, `x: [n]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (ws, xs) = (self.shape(w), self.shape(x));
        assert!(
            ws.len() == 2 && xs.len() == 1 && ws[1] == xs[0],
            "matvec shape mismatch {ws:?} x {xs:?}"
        );
        let (m, n) = (ws[0], ws[1]);
        let (wd, xd) = (self.value(w), self.value(x));
        let out: Vec<f64> = (0..m)
            .map(|i| dot(&wd[i * n..(i + 1) * n], xd))
            .collect();
        self.push(Op::MatVec(w, x), vec![m], out, &[w, x])
    }

    /// `w · x + b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Var {
        let y = self.matvec(w, x);
        self.add(y, b)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "elementwise shape mismatch"
        );
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Concatenate vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(self.shape(p).len(), 1, "concat expects vectors");
            out.extend_from_slice(self.value(p));
        }
        let n = out.len();
        self.push(Op::Concat(parts.to_vec()), vec![n], out, parts)
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack of nothing");
        let inner = self.shape(parts[0]).to_vec();
        let mut out = Vec::with_capacity(parts.len() * self.value(parts[0]).len());
        for &p in parts {
            assert_eq!(self.shape(p), inner.as_slice(), "stack shape mismatch");
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        self.push(Op::Stack(parts.to_vec()), shape, out, parts)
    }

    /// `Σ_i w[i] · t[i, ...]` for `w: [k]`, `t: [k, ...]`. Zero weights are
    /// skipped in the forward pass, so a one-hot `w` returns the selected
    /// slice bit-for-bit.
    pub fn contract(&mut self, w: Var, t: Var) -> Var {
        let (ws, ts) = (self.shape(w), self.shape(t));
        assert!(
            ws.len() == 1 && !ts.is_empty() && ts[0] == ws[0],
            "contract shape mismatch {ws:?} with {ts:?}"
        );
        let rest: Vec<usize> = ts[1..].to_vec();
        let stride: usize = rest.iter().product();
        let (wd, td) = (self.value(w), self.value(t));
        let mut out = vec![0.0; stride];
        let mut first = true;
        for (i, &wi) in wd.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            let slice = &td[i * stride..(i + 1) * stride];
            if first && wi == 1.0 {
                out.copy_from_slice(slice);
            } else {
                for (o, s) in out.iter_mut().zip(slice) {
                    *o += wi * s;
                }
            }
            first = false;
        }
        self.push(Op::Contract(w, t), rest, out, &[w, t])
    }

    /// Stride-1, zero-padded ("same") 2-D convolution.
    /// `input: [C, H, W]`, `kernel: [O, C, K, K]` with odd `K`, `bias: [O]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Var {
        let (is, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        assert!(
            is.len() == 3 && ks.len() == 4 && bs.len() == 1,
            "conv2d expects [C,H,W], [O,C,K,K], [O]"
        );
        let (c, h, w) = (is[0], is[1], is[2]);
        let (o, kc, k) = (ks[0], ks[1], ks[2]);
        assert!(kc == c && ks[3] == k && k % 2 == 1 && bs[0] == o, "conv2d shape mismatch");
        let geom = ConvGeom { c, h, w, o, k };
        let out = conv_forward(&geom, self.value(input), self.value(kernel), self.value(bias));
        self.push(
            Op::Conv2d { input, kernel, bias },
            vec![o, h, w],
            out,
            &[input, kernel, bias],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(a).len(),
            "reshape changes element count"
        );
        let data = self.value(a).to_vec();
        self.push(Op::Reshape(a), shape, data, &[a])
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.reshape(a, vec![n])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Op::Sum(a), vec![], vec![s], &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.value(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Op::Mean(a), vec![], vec![s], &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "dot shape mismatch");
        let s = dot(self.value(a), self.value(b));
        self.push(Op::Dot(a, b), vec![], vec![s], &[a, b])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax(self.value(a));
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax(a), shape, out, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax(self.value(a));
        let shape = self.shape(a).to_vec();
        self.push(Op::LogSoftmax(a), shape, out, &[a])
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let x = self.value(a)[i];
        self.push(Op::Index(a, i), vec![], vec![x], &[a])
    }

    /// Elementwise Huber penalty between `pred` and `target`.
    pub fn huber(&mut self, pred: Var, target: Var, delta: f64) -> Var {
        assert!(delta > 0.0);
        assert_eq!(self.shape(pred), self.shape(target), "huber shape mismatch");
        let out = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| huber(p - t, delta))
            .collect();
        let shape = self.shape(pred).to_vec();
        self.push(
            Op::Huber { pred, target, delta },
            shape,
            out,
            &[pred, target],
        )
    }

    /// One-hot of the argmax of `soft` in the forward pass; identity in the
    /// backward pass.
    pub fn straight_through(&mut self, soft: Var) -> Var {
        let d = self.value(soft);
        let mut out = vec![0.0; d.len()];
        out[argmax(d)] = 1.0;
        let shape = self.shape(soft).to_vec();
        self.push(Op::StraightThrough(soft), shape, out, &[soft])
    }

    /// Categorical entropy `-Σ p log p` of `softmax(logits)`.
    pub fn entropy(&mut self, logits: Var) -> Var {
        let logp = self.log_softmax(logits);
        let p = self.softmax(logits);
        let plogp = self.dot(p, logp);
        self.neg(plogp)
    }

    /// Reverse sweep from a scalar root. Every parameter of the graph's
    /// parameter set gets a buffer; those not reached are zero.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let grads = self.node_gradients(root);
        let params = match self.params {
            Some(p) => p,
            None => return Ok(Gradients::from_parts(Vec::new(), Vec::new())),
        };
        let mut out = params.zero_gradients();
        for (&index, &leaf) in &self.param_leaves {
            if let Some(g) = &grads[leaf.0] {
                out.buffer_mut(index).copy_from_slice(g);
            }
        }
        Ok(out)
    }

    /// Gradient of a scalar root with respect to an arbitrary node, or zeros
    /// when the node does not influence the root.
    pub fn grad_wrt(&self, root: Var, wrt: Var) -> Result<Vec<f64>> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract("backward root must be scalar".into()));
        }
        let grads = self.node_gradients(root);
        Ok(grads[wrt.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.value(wrt).len()]))
    }

    fn node_gradients(&self, root: Var) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(gy) = upper[0].as_ref() else {
                continue;
            };
            self.backprop_node(i, gy, lower);
        }
        grads
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.data();
        let nodes = &self.nodes;
        // Accumulator for a parent; skipped when the parent needs no gradient.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let n = nodes[v.0].data().len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatVec(w, x) => {
                let (wd, xd) = (nodes[w.0].data(), nodes[x.0].data());
                let n = xd.len();
                acc(*w, &mut |gw| {
                    for (row, g) in gw.chunks_exact_mut(n).zip(gy) {
                        if *g != 0.0 {
                            axpy(*g, xd, row);
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (row, g) in wd.chunks_exact(n).zip(gy) {
                        if *g != 0.0 {
                            axpy(*g, row, gx);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(1.0, gy, ga));
                acc(*b, &mut |gb| axpy(1.0, gy, gb));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| axpy(1.0, gy, ga));
                acc(*b, &mut |gb| axpy(-1.0, gy, gb));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (nodes[a.0].data(), nodes[b.0].data());
                acc(*a, &mut |ga| {
                    for ((g, u), v) in ga.iter_mut().zip(gy).zip(bd) {
                        *g += u * v;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((g, u), v) in gb.iter_mut().zip(gy).zip(ad) {
                        *g += u * v;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| axpy(*c, gy, ga)),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((g, u), t) in ga.iter_mut().zip(gy).zip(y) {
                    *g += u * (1.0 - t * t);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((g, u), s) in ga.iter_mut().zip(gy).zip(y) {
                    *g += u * s * (1.0 - s);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((g, u), e) in ga.iter_mut().zip(gy).zip(y) {
                    *g += u * e;
                }
            }),
            Op::Concat(parts) | Op::Stack(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].data().len();
                    acc(*p, &mut |gp| axpy(1.0, &gy[offset..offset + n], gp));
                    offset += n;
                }
            }
            Op::Contract(w, t) => {
                let (wd, td) = (nodes[w.0].data(), nodes[t.0].data());
                let stride = gy.len();
                acc(*w, &mut |gw| {
                    for (gwi, slice) in gw.iter_mut().zip(td.chunks_exact(stride)) {
                        *gwi += dot(gy, slice);
                    }
                });
                acc(*t, &mut |gt| {
                    for (slice, wi) in gt.chunks_exact_mut(stride).zip(wd) {
                        if *wi != 0.0 {
                            axpy(*wi, gy, slice);
                        }
                    }
                });
            }
            Op::Conv2d { input, kernel, bias } => {
                let (is, ks) = (&nodes[input.0].shape, &nodes[kernel.0].shape);
                let geom = ConvGeom {
                    c: is[0],
                    h: is[1],
                    w: is[2],
                    o: ks[0],
                    k: ks[2],
                };
                let (xd, kd) = (nodes[input.0].data(), nodes[kernel.0].data());
                acc(*bias, &mut |gb| {
                    let plane = geom.h * geom.w;
                    for (g, chunk) in gb.iter_mut().zip(gy.chunks_exact(plane)) {
                        *g += chunk.iter().sum::<f64>();
                    }
                });
                acc(*kernel, &mut |gk| conv_kernel_grad(&geom, xd, gy, gk));
                acc(*input, &mut |gx| conv_input_grad(&geom, kd, gy, gx));
            }
            Op::Reshape(a) => acc(*a, &mut |ga| axpy(1.0, gy, ga)),
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|g| *g += gy[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].data().len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|g| *g += gy[0] / n));
            }
            Op::Dot(a, b) => {
                let (ad, bd) = (nodes[a.0].data(), nodes[b.0].data());
                acc(*a, &mut |ga| axpy(gy[0], bd, ga));
                acc(*b, &mut |gb| axpy(gy[0], ad, gb));
            }
            Op::Softmax(a) => {
                let s = dot(gy, y);
                acc(*a, &mut |ga| {
                    for ((g, u), p) in ga.iter_mut().zip(gy).zip(y) {
                        *g += p * (u - s);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let s: f64 = gy.iter().sum();
                acc(*a, &mut |ga| {
                    for ((g, u), lp) in ga.iter_mut().zip(gy).zip(y) {
                        *g += u - lp.exp() * s;
                    }
                });
            }
            Op::Index(a, k) => acc(*a, &mut |ga| ga[*k] += gy[0]),
            Op::Huber { pred, target, delta } => {
                let (pd, td) = (nodes[pred.0].data(), nodes[target.0].data());
                let slope: Vec<f64> = pd
                    .iter()
                    .zip(td)
                    .zip(gy)
                    .map(|((p, t), u)| u * huber_grad(p - t, *delta))
                    .collect();
                acc(*pred, &mut |gp| axpy(1.0, &slope, gp));
                acc(*target, &mut |gt| axpy(-1.0, &slope, gt));
            }
            Op::StraightThrough(a) => acc(*a, &mut |ga| axpy(1.0, gy, ga)),
        }
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
}

impl ConvGeom {
    /// Valid output rows/cols for a kernel offset `d` along an axis of size `n`.
    fn range(n: usize, d: isize) -> std::ops::Range<usize> {
        let lo = (-d).max(0) as usize;
        let hi = (n as isize - d).min(n as isize).max(0) as usize;
        lo..hi.max(lo)
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
    let plane = g.h * g.w;
    let pad = (g.k / 2) as isize;
    let mut out = vec![0.0; g.o * plane];
    for o in 0..g.o {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..g.c {
            let src = &x[c * plane..(c + 1) * plane];
            for ky in 0..g.k {
                let dy = ky as isize - pad;
                for kx in 0..g.k {
                    let dx = kx as isize - pad;
                    let wv = k[((o * g.c + c) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let cols = ConvGeom::range(g.w, dx);
                    for yy in ConvGeom::range(g.h, dy) {
                        let sy = (yy as isize + dy) as usize;
                        let srow = &src[sy * g.w..(sy + 1) * g.w];
                        let drow = &mut dst[yy * g.w..(yy + 1) * g.w];
                        for xx in cols.clone() {
                            drow[xx] += wv * srow[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_kernel_grad(g: &ConvGeom, x: &[f64], gy: &[f64], gk: &mut [f64]) {
    let plane = g.h * g.w;
    let pad = (g.k / 2) as isize;
    for o in 0..g.o {
        let gout = &gy[o * plane..(o + 1) * plane];
        for c in 0..g.c {
            let src = &x[c * plane..(c + 1) * plane];
            for ky in 0..g.k {
                let dy = ky as isize - pad;
                for kx in 0..g.k {
                    let dx = kx as isize - pad;
                    let cols = ConvGeom::range(g.w, dx);
                    let mut s = 0.0;
                    for yy in ConvGeom::range(g.h, dy) {
                        let sy = (yy as isize + dy) as usize;
                        for xx in cols.clone() {
                            s += gout[yy * g.w + xx] * src[sy * g.w + (xx as isize + dx) as usize];
                        }
                    }
                    gk[((o * g.c + c) * g.k + ky) * g.k + kx] += s;
                }
            }
        }
    }
}

fn conv_input_grad(g: &ConvGeom, k: &[f64], gy: &[f64], gx: &mut [f64]) {
    let plane = g.h * g.w;
    let pad = (g.k / 2) as isize;
    for o in 0..g.o {
        let gout = &gy[o * plane..(o + 1) * plane];
        for c in 0..g.c {
            let dst = &mut gx[c * plane..(c + 1) * plane];
            for ky in 0..g.k {
                let dy = ky as isize - pad;
                for kx in 0..g.k {
                    let dx = kx as isize - pad;
                    let wv = k[((o * g.c + c) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let cols = ConvGeom::range(g.w, dx);
                    for yy in ConvGeom::range(g.h, dy) {
                        let sy = (yy as isize + dy) as usize;
                        for xx in cols.clone() {
                            dst[sy * g.w + (xx as isize + dx) as usize] += wv * gout[yy * g.w + xx];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// First index of the maximum.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

pub fn huber(d: f64, delta: f64) -> f64 {
    if d.abs() <= delta {
        0.5 * d * d
    } else {
        delta * (d.abs() - 0.5 * delta)
    }
}

fn huber_grad(d: f64, delta: f64) -> f64 {
    if d.abs() <= delta {
        d
    } else {
        delta * d.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Owner;

    #[test]
    fn tanh_slope_at_zero_is_one() {
        let mut ps = ParamSet::new();
        ps.insert("x", Owner::Encoder, Value::vector(vec![0.0]));
        let mut g = Graph::with_params(&ps);
        let x = g.param("x");
        let y = g.tanh(x);
        let root = g.sum(y);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get("x").unwrap(), &[1.0]);
    }

    #[test]
    fn huber_linear_region_slope() {
        let mut ps = ParamSet::new();
        ps.insert("p", Owner::Encoder, Value::vector(vec![2.0]));
        let mut g = Graph::with_params(&ps);
        let p = g.param("p");
        let t = g.vector(vec![0.0]);
        let h = g.huber(p, t, 1.0);
        assert_eq!(g.value(h), &[1.5]);
        let root = g.sum(h);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get("p").unwrap(), &[1.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.vector(vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_parameter_gets_exact_zero() {
        let mut ps = ParamSet::new();
        ps.insert("used", Owner::Encoder, Value::vector(vec![0.3, -0.2]));
        ps.insert("unused", Owner::OuterAgent, Value::vector(vec![5.0]));
        let mut g = Graph::with_params(&ps);
        let u = g.param("used");
        let _touched_but_detached = g.param("unused");
        let y = g.tanh(u);
        let root = g.sum(y);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get("unused").unwrap(), &[0.0]);
        assert!(grads.get("used").unwrap().iter().all(|v| *v != 0.0));
    }

    #[test]
    fn detached_graph_gives_zero_gradients() {
        let mut ps = ParamSet::new();
        ps.insert("w", Owner::Encoder, Value::vector(vec![1.0, 2.0]));
        let mut g = Graph::with_params(&ps);
        let w = g.param("w");
        let d = g.detach(w);
        let root = g.sum(d);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get("w").unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn contract_with_one_hot_is_bit_exact() {
        let mut g = Graph::new();
        let a = g.vector(vec![-0.0, 1.25e-300, 3.0]);
        let b = g.vector(vec![7.0, 8.0, 9.0]);
        let s = g.stack(&[a, b]);
        let w = g.vector(vec![1.0, 0.0]);
        let z = g.contract(w, s);
        assert_eq!(
            g.value(z).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g.value(a).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut g = Graph::new();
        let x = g.constant(Value::new(vec![1, 2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = g.constant(Value::new(vec![1, 1, 3, 3], kd));
        let b = g.vector(vec![0.5]);
        let y = g.conv2d(x, k, b);
        assert_eq!(g.value(y), &[1.5, 2.5, 3.5, 4.5, 5.5, 6.5]);
    }

    #[test]
    fn conv_shift_kernel_respects_padding() {
        // Kernel picking the left neighbour: out[y][x] = in[y][x-1].
        let mut g = Graph::new();
        let x = g.constant(Value::new(vec![1, 2, 2], vec![1., 2., 3., 4.]));
        let mut kd = vec![0.0; 9];
        kd[3] = 1.0;
        let k = g.constant(Value::new(vec![1, 1, 3, 3], kd));
        let b = g.vector(vec![0.0]);
        let y = g.conv2d(x, k, b);
        assert_eq!(g.value(y), &[0., 1., 0., 3.]);
    }

    #[test]
    #[should_panic(expected = "matvec shape mismatch")]
    fn matvec_dimension_mismatch_panics() {
        let mut g = Graph::new();
        let w = g.constant(Value::zeros(vec![2, 3]));
        let x = g.vector(vec![1.0, 2.0]);
        g.matvec(w, x);
    }

    #[test]
    fn entropy_of_uniform_four_way() {
        let mut g = Graph::new();
        let l = g.vector(vec![0.3; 4]);
        let h = g.entropy(l);
        assert!((g.scalar(h) - 4f64.ln()).abs() < 1e-12);
    }
}
