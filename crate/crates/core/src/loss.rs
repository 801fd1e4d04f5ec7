//! Training objective: weighted BCE, L2 over weights, and learned
//! log-variance task weighting.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

pub use crate::autograd::PROB_EPS;

pub const S1: &str = "loss.s1";
pub const S2: &str = "loss.s2";

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 1.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)))
        }
    }
}

/// Registers the two task log-variances, initialised to zero.
pub fn register_task_weights<T: Scalar>(store: &mut ParamStore<T>) -> Result<()> {
    store.register(S1, Tensor::zeros([1]), ParamKind::LossWeight)?;
    store.register(S2, Tensor::zeros([1]), ParamKind::LossWeight)
}

/// Mean weighted BCE with per-sample road weight `w = 1 - road fraction`.
pub fn wbce<T: Scalar>(s: &mut Session<T>, pred: Var, target: &Tensor<T>, alpha: f64) -> Result<Var> {
    s.graph.wbce(pred, target, alpha)
}

/// `0.5 * sum(theta^2)` over every parameter of kind `Weight`.
pub fn l2_penalty<T: Scalar>(s: &mut Session<T>) -> Result<Var> {
    let names: Vec<String> = s
        .store
        .params()
        .filter(|p| p.kind == ParamKind::Weight)
        .map(|p| p.name.clone())
        .collect();
    let mut acc = s.graph.constant(Tensor::scalar(T::zero()));
    for name in names {
        let p = s.param(&name)?;
        let sq = s.graph.mul(p, p)?;
        let sum = s.graph.sum_all(sq)?;
        acc = s.graph.add(acc, sum)?;
    }
    s.graph.scale(acc, 0.5)
}

/// `exp(-s1) * wbce + exp(-s2) * l2 + s1 + s2`.
pub fn total_loss<T: Scalar>(s: &mut Session<T>, wbce: Var, l2: Var, s1: Var, s2: Var) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    for (task, log_var) in [(wbce, s1), (l2, s2)] {
        let neg = s.graph.scale(log_var, -1.0)?;
        let weight = s.graph.exp(neg)?;
        let weight = s.graph.reshape(weight, Vec::<usize>::new())?;
        let weighted = s.graph.mul(weight, task)?;
        let lv = s.graph.reshape(log_var, Vec::<usize>::new())?;
        terms.push(s.graph.add(weighted, lv)?);
    }
    s.graph.add(terms[0], terms[1])
}

/// Effective task weights `(exp(-s1), exp(-s2))` currently in the store.
pub fn task_weights<T: Scalar>(store: &ParamStore<T>) -> Result<(f64, f64)> {
    let s1 = store.get(S1)?.tensor.data()[0].as_f64();
    let s2 = store.get(S2)?.tensor.data()[0].as_f64();
    Ok(((-s1).exp(), (-s2).exp()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session_value(f: impl FnOnce(&mut Session<f64>) -> Var) -> f64 {
        let mut store = ParamStore::new();
        let mut s = Session::new(&mut store, false);
        let v = f(&mut s);
        s.value(v).data()[0]
    }

    #[test]
    fn background_target_at_half_is_log_two() {
        for alpha in [0.5, 1.5, 4.0] {
            let v = session_value(|s| {
                let p = s.input(Tensor::full([1, 1, 4, 4], 0.5));
                wbce(s, p, &Tensor::zeros([1, 1, 4, 4]), alpha).unwrap()
            });
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_prediction_is_tiny() {
        let t = Tensor::from_fn([1, 1, 2, 5], |i| (i % 3 == 0) as u8 as f64);
        let v = session_value(|s| {
            let p = s.input(t.clone());
            wbce(s, p, &t, 1.5).unwrap()
        });
        assert!(v >= 0.0 && v <= -(1.0 - PROB_EPS).ln() * 1.5 + 1e-15);
    }

    #[test]
    fn road_weight_is_one_minus_fraction() {
        // 30 road pixels out of 100 predicted at p = e^-1: loss = 1.5 * 0.7 * 30 / 100
        let t = Tensor::from_fn([1, 1, 10, 10], |i| (i < 30) as u8 as f64);
        let p = Tensor::from_fn([1, 1, 10, 10], |i| if i < 30 { (-1.0f64).exp() } else { 1e-300 });
        let v = session_value(|s| {
            let p = s.input(p);
            wbce(s, p, &t, 1.5).unwrap()
        });
        let bg = -(1.0 - PROB_EPS).ln() * 70.0 / 100.0;
        assert!((v - (1.5 * 0.7 * 30.0 / 100.0 + bg)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn l2_of_ones_is_half_count() {
        let mut store = ParamStore::<f64>::new();
        store.register("w", Tensor::full([3, 4], 1.0), ParamKind::Weight).unwrap();
        store.register("b", Tensor::full([4], 5.0), ParamKind::Bias).unwrap();
        store.register("g", Tensor::full([4], 5.0), ParamKind::Norm).unwrap();
        let mut s = Session::new(&mut store, false);
        let l = l2_penalty(&mut s).unwrap();
        assert_eq!(s.value(l).data(), &[6.0]);
    }

    #[test]
    fn l2_of_empty_store_is_zero() {
        assert_eq!(session_value(|s| l2_penalty(s).unwrap()), 0.0);
    }

    #[test]
    fn unit_weights_sum_terms() {
        let mut store = ParamStore::<f64>::new();
        register_task_weights(&mut store).unwrap();
        let mut s = Session::new(&mut store, true);
        let a = s.input(Tensor::scalar(0.3));
        let b = s.input(Tensor::scalar(2.5));
        let (s1, s2) = (s.param(S1).unwrap(), s.param(S2).unwrap());
        let t = total_loss(&mut s, a, b, s1, s2).unwrap();
        assert_eq!(s.value(t).data(), &[0.3 + 2.5]);
        s.backward(t).unwrap();
        // d/ds1 = 1 - exp(-s1) * wbce
        assert!((store.get(S1).unwrap().grad[0] - 0.7).abs() < 1e-15);
        assert!((store.get(S2).unwrap().grad[0] + 1.5).abs() < 1e-15);
    }
}
