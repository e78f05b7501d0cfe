//! Hard Gumbel-Softmax samples against the categorical they relax.
//!
//! Draws 100k straight-through samples for a few logit vectors and prints
//! the empirical frequency of each category next to softmax(logits).

use dpn::diffcore::{gumbel_softmax, softmax, Graph};
use dpn::rng::stream_rng;

fn main() -> dpn::Result<()> {
    let samples = 100_000;
    let mut rng = stream_rng(7, 0);
    for logits in [vec![0.5, -1.0, 2.0], vec![0.0, 0.3, -0.7, 1.1]] {
        let probs = softmax(&logits);
        let mut counts = vec![0usize; logits.len()];
        for _ in 0..samples {
            let mut g = Graph::new();
            let l = g.vector(logits.clone());
            let y = gumbel_softmax(&mut g, l, 1.0, true, &mut rng)?;
            let hot = g.value(y);
            assert_eq!(hot.iter().filter(|x| **x == 1.0).count(), 1);
            counts[hot.iter().position(|x| *x == 1.0).unwrap()] += 1;
        }
        println!("logits {logits:?}");
        for (i, p) in probs.iter().enumerate() {
            let f = counts[i] as f64 / samples as f64;
            println!("  category {i}: softmax {p:.4}  sampled {f:.4}  gap {:+.4}", f - p);
        }
    }
    Ok(())
}
