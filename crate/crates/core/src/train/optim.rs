use ndarray::{Array2, Zip};

use crate::encoder::{GradientSet, ModelParameters};

/// Adam with decoupled weight decay. Decay applies to weight matrices and
/// embeddings only, not to biases or layer-norm parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    moments: Vec<Option<(Array2<f64>, Array2<f64>)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParameters, grads: &GradientSet) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let n = params.tensors().len();
        if self.moments.len() < n {
            self.moments.resize(n, None);
        }
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (id, g) in grads.iter() {
            let t = &mut params.tensors_mut()[id.index()];
            if !t.trainable {
                continue;
            }
            let decay = if decays(&t.name) {
                self.weight_decay
            } else {
                0.0
            };
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Array2::zeros(g.raw_dim()), Array2::zeros(g.raw_dim())));
            Zip::from(&mut t.value)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p -= lr * (update + decay * *p);
                });
        }
    }
}

fn decays(name: &str) -> bool {
    name.ends_with(".weight") || name.starts_with("embeddings.")
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut GradientSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
