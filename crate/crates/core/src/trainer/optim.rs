use crate::diffcore::{Gradients, ParamSet};

/// RMSprop in the common deep-learning form:
/// `v ← αv + (1−α)g²`, `θ ← θ − lr·g / (√v + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub clip_norm: f64,
    pub square_avg: Vec<Vec<f64>>,
    pub steps: u64,
}

/// What [`RmsProp::apply`] did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateReport {
    /// Global norm before clipping.
    pub grad_norm: f64,
    pub applied: bool,
}

impl RmsProp {
    pub fn new(params: &ParamSet, lr: f64, decay: f64, eps: f64, clip_norm: f64) -> Self {
        Self {
            lr,
            decay,
            eps,
            clip_norm,
            square_avg: params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect(),
            steps: 0,
        }
    }

    /// Clips, then updates every parameter in place. A non-finite gradient
    /// leaves both the parameters and the optimizer state untouched.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &Gradients) -> UpdateReport {
        assert_eq!(grads.len(), params.len(), "gradient set does not match parameters");
        let norm = grads.global_norm();
        if !grads.is_finite() || !norm.is_finite() {
            log::warn!("non-finite gradient (norm {norm}); update skipped");
            return UpdateReport {
                grad_norm: norm,
                applied: false,
            };
        }
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        for index in 0..params.len() {
            let g = grads.buffer(index);
            let v = &mut self.square_avg[index];
            let theta = params.by_index_mut(index).1.value.data_mut();
            for ((t, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
                let gi = gi * scale;
                *vi = self.decay * *vi + (1.0 - self.decay) * gi * gi;
                *t -= self.lr * gi / (vi.sqrt() + self.eps);
            }
        }
        self.steps += 1;
        UpdateReport {
            grad_norm: norm,
            applied: true,
        }
    }
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
