//! Adaptive-moment (Adam) optimizer.

use crate::error::{Error, Result};

use super::tape::{Gradients, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus a step counter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update to every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer holds {} slots, store has {}, gradients have {}",
                self.first.len(),
                store.len(),
                grads.len()
            )));
        }
        for id in store.ids() {
            let g = grads.get(id);
            if g.shape() != store.get(id).shape() || g.shape() != self.first[id.0].shape() {
                return Err(Error::shape("optimizer_step", store.get(id).shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.trainable() {
            let g = grads.get(id).data();
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer_step" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.25));
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let zero = Gradients::zeros_like(&store);
        opt.step(&mut store, &zero).unwrap();
        assert_eq!(store.get(id).item(), 1.25);
    }

    #[test]
    fn first_step_is_bounded_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let v = tape.param(&store, id);
        let loss = tape.sum(v).unwrap();
        let g = tape.backward(loss, &store).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        opt.step(&mut store, &g).unwrap();
        let theta = store.get(id).item();
        assert!(theta < 0.0 && theta.abs() <= 0.1, "{theta}");
    }

    #[test]
    fn fits_least_squares_slope() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[1, 1]));
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 10.0 - 1.0).collect();
        let x = Tensor::matrix(20, 1, xs.clone()).unwrap();
        let y = Tensor::matrix(20, 1, xs.iter().map(|v| 2.0 * v).collect()).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &store);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let wv = tape.param(&store, w);
            let xv = tape.constant(x.clone());
            let pred = tape.matmul(xv, wv).unwrap();
            let neg = tape.constant(y.map(|v| -v));
            let r = tape.add(pred, neg).unwrap();
            let sq = tape.mul(r, r).unwrap();
            let loss = tape.mean(sq, 0).unwrap();
            let g = tape.backward(loss, &store).unwrap();
            opt.step(&mut store, &g).unwrap();
        }
        assert!((store.get(w).item() - 2.0).abs() < 0.05, "{}", store.get(w).item());
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let v = tape.param(&store, id);
        let loss = tape.sum(v).unwrap();
        let g = tape.backward(loss, &store).unwrap();
        store.set_frozen(true);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.step(&mut store, &g).unwrap();
        assert_eq!(store.get(id).item(), 3.0);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(3.0));
        let other = ParamStore::new();
        let mut opt = Adam::new(AdamConfig::default(), &store);
        assert!(opt.step(&mut store, &Gradients::zeros_like(&other)).is_err());
    }
}
