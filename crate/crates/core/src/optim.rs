use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use crate::nn::ParamStore;

/// Heavy-ball SGD with optional L2 weight decay and global gradient clipping.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the whole gradient when its norm exceeds this; 0 disables.
    pub clip_norm: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl MomentumSgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, clip_norm: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            clip_norm,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update. Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> f64 {
        let norm = grads.sq_norm().sqrt();
        let factor = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        for (name, p) in params.iter_mut() {
            let Ok(g) = grads.get(name) else { continue };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let (m, wd, lr) = (self.momentum, self.weight_decay, self.lr);
            Zip::from(p).and(v).and(g).for_each(|p, v, &g| {
                *v = m * *v + g * factor + wd * *p;
                *p -= lr * *v;
            });
        }
        norm
    }
}
