//! SGD with momentum and polynomial learning-rate decay.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// `base * (1 - iter / max_iter)^power`.
pub fn poly_lr(base: f64, iter: u64, max_iter: u64, power: f64) -> f64 {
    if max_iter == 0 {
        return base;
    }
    base * (1.0 - (iter as f64 / max_iter as f64).min(1.0)).powf(power)
}

/// `v = mu * v + g; theta -= lr * v`, one velocity buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub velocity: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64) -> Self {
        let velocity = store
            .params()
            .map(|p| (p.name.clone(), Tensor::zeros(p.tensor.shape().to_vec())))
            .collect();
        Self {
            momentum,
            velocity,
            step: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        let (mu, lr) = (T::lit(self.momentum), T::lit(lr));
        for p in store.params_mut() {
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.tensor.shape().to_vec()));
            for ((theta, vel), &g) in p.tensor.data_mut().iter_mut().zip(v.data_mut()).zip(&p.grad) {
                *vel = mu * *vel + g;
                *theta -= lr * *vel;
            }
        }
        self.step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0.01, 0, 100, 0.9), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100, 0.9), 0.0);
        assert!((poly_lr(1.0, 50, 100, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut store = ParamStore::<f64>::new();
        store.register("w", Tensor::scalar(1.0), ParamKind::Weight).unwrap();
        let mut opt = Sgd::new(&store, 0.9);
        for _ in 0..2 {
            store.get_mut("w").unwrap().grad[0] = 1.0;
            opt.step(&mut store, 0.1);
        }
        // v1 = 1, v2 = 1.9; theta = 1 - 0.1 - 0.19
        assert!((store.get("w").unwrap().tensor.data()[0] - 0.71).abs() < 1e-15);
        assert_eq!(opt.step, 2);
    }
}
