use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::substrate::{ParamGrads, ParamStore, Scalar};

/// Adam with bias correction and no weight decay. Moments are kept in `f64`
/// so a checkpointed state resumes exactly for either precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect(),
            v: store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    /// Updates every trainable parameter; frozen ones are left untouched.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - libm_powi(self.beta1, self.t);
        let c2 = 1.0 - libm_powi(self.beta2, self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (i, w) in store.get_mut(id).tensor.data_mut().iter_mut().enumerate() {
                let gi = g[i].to_f64_lossy();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                let upd = lr * mh / (num_traits::Float::sqrt(vh) + self.eps);
                *w = T::from_f64_lossy(w.to_f64_lossy() - upd);
            }
        }
    }
}

fn libm_powi(x: f64, n: u64) -> f64 {
    num_traits::Float::powf(x, n as f64)
}
