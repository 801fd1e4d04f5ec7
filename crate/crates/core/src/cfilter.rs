//! Context-guided skip filter: a spatial gate computed from the deep
//! feature scales the shallow feature before the two are added.

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::nn::Conv2d;
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Scalar;

pub const DEFAULT_KERNEL: usize = 7;

/// Per-pixel mean and max across channels, each `[N, 1, H, W]`.
pub fn channel_pool<T: Scalar>(s: &mut Session<T>, x: Var) -> Result<(Var, Var)> {
    if s.graph.shape(x).len() != 4 {
        return shape_err(format!("channel pool expects [N, C, H, W], got {:?}", s.graph.shape(x)));
    }
    let avg = s.graph.mean(x, 1, true)?;
    let max = s.graph.max(x, 1, true)?;
    Ok((avg, max))
}

#[derive(Clone, Debug)]
pub struct CFilter {
    pub gate: Conv2d,
}

impl CFilter {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, kernel: usize) -> Result<Self> {
        Ok(Self {
            gate: Conv2d::new(store, rng, &format!("{prefix}.gate"), 2, 1, kernel, 1, kernel / 2, true)?,
        })
    }

    /// Gate map in (0, 1), `[N, 1, H, W]`.
    pub fn gate<T: Scalar>(&self, s: &mut Session<T>, x2: Var) -> Result<Var> {
        let (avg, max) = channel_pool(s, x2)?;
        let pooled = s.graph.concat(&[avg, max], 1)?;
        let logits = self.gate.forward(s, pooled)?;
        s.graph.sigmoid(logits)
    }

    /// `gate(x2) * x1 + x2`, with `x1` the shallow skip and `x2` the deep
    /// feature already at the skip's resolution.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x1: Var, x2: Var) -> Result<Var> {
        if s.graph.shape(x1) != s.graph.shape(x2) {
            return shape_err(format!(
                "cfilter inputs differ: {:?} vs {:?}",
                s.graph.shape(x1),
                s.graph.shape(x2)
            ));
        }
        let gate = self.gate(s, x2)?;
        let gated = s.graph.mul(x1, gate)?;
        s.graph.add(gated, x2)
    }
}
