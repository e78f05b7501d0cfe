//! Gumbel-Softmax sampling with an optional straight-through hard sample.

use rand::Rng;

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// `k` independent standard Gumbel draws, `-ln(-ln U)` with `U` uniform on
/// the open unit interval.
pub fn gumbel_noise<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let u: f64 = loop {
                let u = rng.gen::<f64>();
                if u > 0.0 {
                    break u;
                }
            };
            -(-u.ln()).ln()
        })
        .collect()
}

/// Relaxed sample `softmax((logits + g) / temperature)`. With `hard`, the
/// forward value is the one-hot argmax of that sample and the backward pass
/// uses the relaxed sample's gradient.
pub fn gumbel_softmax<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    logits: Var,
    temperature: f64,
    hard: bool,
    rng: &mut R,
) -> Result<Var> {
    let noise = gumbel_noise(g.value(logits).len(), rng);
    gumbel_softmax_with_noise(g, logits, &noise, temperature, hard)
}

/// Same as [`gumbel_softmax`] with the Gumbel perturbation supplied by the
/// caller, which makes a sample exactly replayable.
pub fn gumbel_softmax_with_noise(
    g: &mut Graph<'_>,
    logits: Var,
    noise: &[f64],
    temperature: f64,
    hard: bool,
) -> Result<Var> {
    let k = g.value(logits).len();
    if g.shape(logits).len() != 1 || k < 2 {
        return Err(Error::InvalidInput(format!(
            "gumbel-softmax needs a vector of at least 2 logits, got shape {:?}",
            g.shape(logits)
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if g.value(logits).iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite logits".into()));
    }
    if noise.len() != k {
        return Err(Error::InvalidInput(format!(
            "expected {k} noise values, got {}",
            noise.len()
        )));
    }
    let noise = g.vector(noise.to_vec());
    let perturbed = g.add(logits, noise);
    let scaled = g.scale(perturbed, 1.0 / temperature);
    let soft = g.softmax(scaled);
    Ok(if hard { g.straight_through(soft) } else { soft })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::graph::softmax;
    use crate::rng::stream_rng;

    fn frequencies(logits: &[f64], draws: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, 0);
        let mut counts = vec![0usize; logits.len()];
        for _ in 0..draws {
            let mut g = Graph::new();
            let l = g.vector(logits.to_vec());
            let s = gumbel_softmax(&mut g, l, 1.0, true, &mut rng).unwrap();
            let v = g.value(s);
            assert_eq!(v.iter().filter(|x| **x == 1.0).count(), 1);
            assert_eq!(v.iter().filter(|x| **x == 0.0).count(), v.len() - 1);
            counts[v.iter().position(|x| *x == 1.0).unwrap()] += 1;
        }
        counts.iter().map(|c| *c as f64 / draws as f64).collect()
    }

    #[test]
    fn dominant_logit_almost_always_wins() {
        let f = frequencies(&[30.0, 0.0, 0.0], 10_000, 1);
        assert!(f[0] > 0.999, "{f:?}");
    }

    #[test]
    fn equal_logits_give_uniform_frequencies() {
        for k in [2usize, 3, 5] {
            let f = frequencies(&vec![0.7; k], 100_000, 2 + k as u64);
            for p in f {
                assert!((p - 1.0 / k as f64).abs() < 0.01, "k={k} p={p}");
            }
        }
    }

    #[test]
    fn skewed_logits_match_categorical() {
        let logits = [1.0, -0.5, 0.25, 2.0];
        let exact = softmax(&logits);
        let f = frequencies(&logits, 100_000, 9);
        for (a, b) in f.iter().zip(&exact) {
            assert!((a - b).abs() < 0.01, "{f:?} vs {exact:?}");
        }
    }

    #[test]
    fn soft_sample_sums_to_one() {
        let mut rng = stream_rng(3, 0);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut g = Graph::new();
            let l = g.vector(logits);
            let s = gumbel_softmax(&mut g, l, 0.5, false, &mut rng).unwrap();
            let sum: f64 = g.value(s).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(g.value(s).iter().all(|p| *p > 0.0));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = stream_rng(0, 0);
        let mut g = Graph::new();
        let bad = g.vector(vec![f64::NAN, 0.0]);
        assert!(gumbel_softmax(&mut g, bad, 1.0, true, &mut rng).is_err());
        let one = g.vector(vec![1.0]);
        assert!(gumbel_softmax(&mut g, one, 1.0, true, &mut rng).is_err());
        let ok = g.vector(vec![1.0, 2.0]);
        assert!(gumbel_softmax(&mut g, ok, 0.0, true, &mut rng).is_err());
    }

    #[test]
    fn straight_through_passes_soft_gradient() {
        use crate::diffcore::{Owner, ParamSet, Value};
        let mut ps = ParamSet::new();
        ps.insert("logits", Owner::InnerAgent, Value::vector(vec![0.5, 0.1, -0.2]));
        let noise = [0.1, -0.3, 0.2];
        let grad = |hard: bool| {
            let mut g = Graph::with_params(&ps);
            let l = g.param("logits");
            let s = gumbel_softmax_with_noise(&mut g, l, &noise, 1.0, hard).unwrap();
            let w = g.vector(vec![1.0, 2.0, 3.0]);
            let r = g.dot(s, w);
            g.backward(r).unwrap().get("logits").unwrap().to_vec()
        };
        let (hard, soft) = (grad(true), grad(false));
        assert_eq!(hard, soft);
        assert!(hard.iter().any(|v| *v != 0.0));
    }
}
