//! Adam with bias-corrected first and second moment estimates.

use std::collections::BTreeMap;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

/// Moment state is kept per parameter and created lazily on the first
/// gradient, so parameters that join later (new progressive stages) start
/// from zero moments while existing ones keep theirs.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        for (id, g) in grads {
            let value = store.value_mut(*id);
            assert_eq!(value.shape(), g.shape(), "gradient shape mismatch");
            let n = g.len();
            let m = self.state.entry(*id).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
                steps: 0,
            });
            m.steps += 1;
            let bc1 = 1.0 - self.beta1.powi(m.steps as i32);
            let bc2 = 1.0 - self.beta2.powi(m.steps as i32);
            let p = value.data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m.first[i] = self.beta1 * m.first[i] + (1.0 - self.beta1) * gi;
                m.second[i] = self.beta2 * m.second[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.first[i] / bc1;
                let vh = m.second[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Number of updates applied to `id` so far.
    pub fn steps_for(&self, id: ParamId) -> u64 {
        self.state.get(&id).map_or(0, |m| m.steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut adam = Adam::new(0.5, 0.9);
        adam.step(&mut store, &[(id, Tensor::from_vec(&[2], vec![3.0, -0.1]))], 0.01);
        // bias correction makes the first step ±lr regardless of magnitude
        let v = store.get(id).data();
        assert!((v[0] - 0.99).abs() < 1e-6);
        assert!((v[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]));
        let before = store.get(id).clone();
        let mut adam = Adam::new(0.0, 0.99);
        for _ in 0..5 {
            adam.step(&mut store, &[(id, Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]))], 0.0);
        }
        assert_eq!(store.get(id), &before);
        assert_eq!(adam.steps_for(id), 5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(&[1], vec![5.0]));
        let mut adam = Adam::new(0.9, 0.999);
        for _ in 0..2000 {
            let x = store.get(id).data()[0];
            adam.step(&mut store, &[(id, Tensor::from_vec(&[1], vec![2.0 * (x - 1.5)]))], 0.05);
        }
        assert!((store.get(id).data()[0] - 1.5).abs() < 1e-2);
    }
}
