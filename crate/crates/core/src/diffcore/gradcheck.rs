use super::graph::{Graph, Var};
use super::value::ParamSet;
use crate::error::Result;

/// Largest `|analytic − numeric| / max(1, |numeric|)` over every parameter
/// entry, with central differences of step `eps`. `f` must build a scalar.
///
/// Whatever `f` passes through `detach` is held at its value at `point`
/// during the perturbed evaluations, so the comparison is against the
/// surrogate objective whose gradient `backward` actually computes.
pub fn grad_check<F>(point: &ParamSet, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let (analytic, frozen) = {
        let mut g = Graph::with_params(point);
        let root = f(&mut g);
        (g.backward(root)?, g.detached_values().to_vec())
    };
    let eval = |ps: &ParamSet| {
        let mut g = Graph::inference(ps).freeze_detached(frozen.clone());
        let root = f(&mut g);
        g.scalar(root)
    };
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for index in 0..point.len() {
        let n = point.by_index(index).1.value.len();
        for j in 0..n {
            let x0 = point.by_index(index).1.value.data()[j];
            probe.by_index_mut(index).1.value.data_mut()[j] = x0 + eps;
            let plus = eval(&probe);
            probe.by_index_mut(index).1.value.data_mut()[j] = x0 - eps;
            let minus = eval(&probe);
            probe.by_index_mut(index).1.value.data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.buffer(index)[j];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Owner, Value};

    #[test]
    fn detached_factor_stays_frozen() {
        // d/dx [x · stop(x)] is stop(x) = 3, while the plain derivative of
        // x² would be 6.
        let mut ps = ParamSet::new();
        ps.insert("x", Owner::Encoder, Value::vector(vec![3.0]));
        let f = |g: &mut Graph<'_>| {
            let x = g.param("x");
            let d = g.detach(x);
            g.dot(x, d)
        };
        assert!(grad_check(&ps, 1e-5, f).unwrap() < 1e-8);
        let mut g = Graph::with_params(&ps);
        let root = f(&mut g);
        assert_eq!(g.backward(root).unwrap().get("x").unwrap(), &[3.0]);
    }

    #[test]
    fn square_at_three() {
        let mut ps = ParamSet::new();
        ps.insert("x", Owner::Encoder, Value::vector(vec![3.0]));
        let err = grad_check(&ps, 1e-5, |g| {
            let x = g.param("x");
            g.dot(x, x)
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut ps = ParamSet::new();
        ps.insert("x", Owner::Encoder, Value::vector(vec![1.0, 2.0]));
        let err = grad_check(&ps, 1e-5, |g| g.scalar_const(4.0)).unwrap();
        assert_eq!(err, 0.0);
    }
}

/// Finite-difference check of every primitive on `instances` random inputs
/// each. Returns the worst relative error per primitive.
pub fn primitive_gradient_suite(instances: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use super::recurrent::GruCell;
    use super::value::{Owner, Value};
    use crate::rng::stream_rng;

    type Build = fn(&mut Graph<'_>) -> Var;
    // Each case reads parameters "a", "b", "c" (vectors of length 4 unless
    // noted) and reduces through a weighted dot with "probe".
    fn probe(g: &mut Graph<'_>, y: Var) -> Var {
        let n = g.value(y).len();
        let flat = g.flatten(y);
        let w = g.vector((0..n).map(|i| 0.3 + 0.17 * i as f64).collect());
        g.dot(flat, w)
    }
    let cases: Vec<(&'static str, Build)> = vec![
        ("matvec", |g| {
            let m = g.param("m");
            let a = g.param("a");
            let y = g.matvec(m, a);
            probe(g, y)
        }),
        ("affine", |g| {
            let m = g.param("m");
            let a = g.param("a");
            let b = g.param("h3");
            let y = g.affine(m, a, b);
            probe(g, y)
        }),
        ("add_sub_mul_scale", |g| {
            let (a, b, c) = (g.param("a"), g.param("b"), g.param("c"));
            let s = g.add(a, b);
            let d = g.sub(s, c);
            let m = g.mul(d, a);
            let y = g.scale(m, -1.7);
            probe(g, y)
        }),
        ("tanh", |g| {
            let a = g.param("a");
            let y = g.tanh(a);
            probe(g, y)
        }),
        ("sigmoid", |g| {
            let a = g.param("a");
            let y = g.sigmoid(a);
            probe(g, y)
        }),
        ("exp", |g| {
            let a = g.param("a");
            let y = g.exp(a);
            probe(g, y)
        }),
        ("concat", |g| {
            let (a, b) = (g.param("a"), g.param("b"));
            let y = g.concat(&[a, b, a]);
            let t = g.tanh(y);
            probe(g, t)
        }),
        ("stack_contract", |g| {
            let (a, b, c) = (g.param("a"), g.param("b"), g.param("c"));
            let s = g.stack(&[a, b, c]);
            let w = g.param("w3");
            let y = g.contract(w, s);
            probe(g, y)
        }),
        ("conv2d", |g| {
            let x = g.param("img");
            let k = g.param("kernel");
            let b = g.param("bias");
            let y = g.conv2d(x, k, b);
            let t = g.tanh(y);
            probe(g, t)
        }),
        ("sum_mean_dot", |g| {
            let (a, b) = (g.param("a"), g.param("b"));
            let s = g.sum(a);
            let m = g.mean(b);
            let d = g.dot(a, b);
            let sm = g.add(s, m);
            let y = g.mul(sm, d);
            probe(g, y)
        }),
        ("softmax", |g| {
            let a = g.param("a");
            let y = g.softmax(a);
            probe(g, y)
        }),
        ("log_softmax_index", |g| {
            let a = g.param("a");
            let y = g.log_softmax(a);
            let i = g.index(y, 2);
            let s = g.sum(y);
            let r = g.add(i, s);
            probe(g, r)
        }),
        ("entropy", |g| {
            let a = g.param("a");
            g.entropy(a)
        }),
        ("huber", |g| {
            let (a, b) = (g.param("a"), g.param("b"));
            let d = g.scale(a, 2.0);
            let y = g.huber(d, b, 1.0);
            probe(g, y)
        }),
        ("recurrent_cell", |g| {
            let cell = GruCell::new("cell", 4, 3);
            let a = g.param("a");
            let h0 = g.param("h3");
            let h1 = cell.forward(g, a, h0);
            let h2 = cell.forward(g, a, h1);
            probe(g, h2)
        }),
    ];

    let mut report = Vec::with_capacity(cases.len());
    for (name, build) in cases {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = stream_rng(seed, crate::rng::stream_id(&[name.len() as u64, i as u64]));
            let mut ps = ParamSet::new();
            for v in ["a", "b", "c"] {
                ps.insert(v, Owner::Encoder, Value::uniform(vec![4], 1.5, &mut rng));
            }
            ps.insert("m", Owner::Encoder, Value::uniform(vec![3, 4], 1.0, &mut rng));
            ps.insert("w3", Owner::Encoder, Value::uniform(vec![3], 1.0, &mut rng));
            ps.insert("h3", Owner::Encoder, Value::uniform(vec![3], 0.9, &mut rng));
            ps.insert("img", Owner::Encoder, Value::uniform(vec![2, 4, 3], 1.0, &mut rng));
            ps.insert("kernel", Owner::Encoder, Value::uniform(vec![3, 2, 3, 3], 0.5, &mut rng));
            ps.insert("bias", Owner::Encoder, Value::uniform(vec![3], 0.5, &mut rng));
            GruCell::new("cell", 4, 3).init_params(&mut ps, Owner::InnerAgent, &mut rng);
            worst = worst.max(grad_check(&ps, 1e-5, build)?);
        }
        report.push((name, worst));
    }
    Ok(report)
}
