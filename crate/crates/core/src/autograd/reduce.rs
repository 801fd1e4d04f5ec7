use super::{Graph, GradSink, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Gradient flows to the first (lowest-index) maximum.
    Max,
}

impl ReduceKind {
    pub fn name(self) -> &'static str {
        match self {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::Max => "max",
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, n, inner) = split(&shape, axis);
        if n == 0 {
            return Err(Error::Domain(format!("{} over empty axis {axis}", kind.name())));
        }
        let data = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for k in 0..n {
                        let row = &data[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = T::one() / T::lit(n as f64);
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceKind::Max => {
                argmax = vec![0usize; outer * inner];
                for o in 0..outer {
                    for j in 0..inner {
                        let mut best = o * n * inner + j;
                        for k in 1..n {
                            let idx = (o * n + k) * inner + j;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                        out[o * inner + j] = data[best];
                        argmax[o * inner + j] = best;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let out = Tensor::new(out_shape, out)?;
        self.push(
            out,
            &[x],
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            },
        )
    }

    pub fn sum(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axis, keepdim)
    }

    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axis, keepdim)
    }

    pub fn max(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Max, x, axis, keepdim)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, [n])?;
        self.sum(flat, 0, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, [n])?;
        self.mean(flat, 0, false)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let Some(&n) = v.shape().last() else {
            return shape_err("softmax of a rank-0 tensor");
        };
        if n == 0 {
            return Err(Error::Domain("softmax over an empty axis".into()));
        }
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                total += *e;
            }
            let inv = T::one() / total;
            row.iter_mut().for_each(|e| *e *= inv);
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push(out, &[x], Op::Softmax { x })
    }
}

pub(super) fn reduce_backward<T: Scalar>(
    graph: &Graph<T>,
    kind: ReduceKind,
    x: Var,
    axis: usize,
    argmax: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (outer, n, inner) = split(graph.shape(x), axis);
    let Some(slot) = sink.slot(x) else { return };
    match kind {
        ReduceKind::Sum | ReduceKind::Mean => {
            let scale = if kind == ReduceKind::Mean {
                T::one() / T::lit(n as f64)
            } else {
                T::one()
            };
            for o in 0..outer {
                let go = &g[o * inner..(o + 1) * inner];
                for k in 0..n {
                    let row = &mut slot[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (s, &d) in row.iter_mut().zip(go) {
                        *s += d * scale;
                    }
                }
            }
        }
        ReduceKind::Max => {
            for (&src, &d) in argmax.iter().zip(g) {
                slot[src] += d;
            }
        }
    }
}

pub(super) fn softmax_backward<T: Scalar>(
    x: Var,
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let n = *out.shape().last().expect("checked in forward");
    let Some(slot) = sink.slot(x) else { return };
    for ((y, gy), gx) in out
        .data()
        .chunks(n)
        .zip(g.chunks(n))
        .zip(slot.chunks_mut(n))
    {
        let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
        for i in 0..n {
            gx[i] += y[i] * (gy[i] - dot);
        }
    }
}
