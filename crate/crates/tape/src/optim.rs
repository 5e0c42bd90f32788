use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::ParamStore;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first_moment: BTreeMap<String, Vec<f64>>,
    pub second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has an entry in `grads`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            assert_eq!(p.len(), g.len(), "gradient size mismatch for `{name}`");
            let m = self.first_moment.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second_moment.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * self.weight_decay * *p;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine-annealed learning rate at `epoch` of `total`: `max_lr` at epoch 0,
/// `min_lr` at epoch `total`.
pub fn cosine_lr(epoch: usize, total: usize, max_lr: f64, min_lr: f64) -> f64 {
    if total == 0 {
        return max_lr;
    }
    let t = epoch.min(total) as f64 / total as f64;
    let w = 0.5 * (1.0 + (PI * t).cos());
    // written as a convex blend so both endpoints are reproduced exactly
    max_lr * w + min_lr * (1.0 - w)
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= k);
    }
    norm
}
