use super::{Graph, GradSink, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

impl<T: Scalar> Graph<T> {
    /// Weighted binary cross entropy averaged over every pixel.
    ///
    /// `pred` and `target` are `[N, ...]`; the positive-class weight of
    /// sample `n` is `alpha * (1 - road_n / total_n)` with `road_n` counted
    /// from the target.
    pub fn wbce(&mut self, pred: Var, target: &Tensor<T>, alpha: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return shape_err(format!(
                "wbce prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            ));
        }
        let total = p.numel();
        if total == 0 || p.rank() == 0 || p.shape()[0] == 0 {
            return Err(Error::Domain("wbce of an empty tensor".into()));
        }
        let per_sample = total / p.shape()[0];
        let eps = T::lit(PROB_EPS);
        let hi = T::one() - eps;
        let inv_n = T::one() / T::lit(total as f64);
        let alpha = T::lit(alpha);
        let mut loss = T::zero();
        let mut dpred = vec![T::zero(); total];
        for ((ps, gs), ds) in p
            .data()
            .chunks(per_sample)
            .zip(target.data().chunks(per_sample))
            .zip(dpred.chunks_mut(per_sample))
        {
            let road: T = gs.iter().copied().sum();
            let w = T::one() - road / T::lit(per_sample as f64);
            let pos = alpha * w;
            for i in 0..per_sample {
                let (raw, g) = (ps[i], gs[i]);
                let q = raw.max(eps).min(hi);
                loss += pos * g * q.ln() + (T::one() - g) * (T::one() - q).ln();
                if raw > eps && raw < hi {
                    ds[i] = -inv_n * (pos * g / q - (T::one() - g) / (T::one() - q));
                }
            }
        }
        let out = Tensor::scalar(-loss * inv_n);
        self.push(out, &[pred], Op::Wbce { pred, dpred })
    }
}

pub(super) fn wbce_backward<T: Scalar>(pred: Var, dpred: &[T], g: &[T], sink: &mut GradSink<'_, T>) {
    let scale = g[0];
    if let Some(slot) = sink.slot(pred) {
        slot.iter_mut().zip(dpred).for_each(|(a, &d)| *a += d * scale);
    }
}
