use super::{Graph, GradSink, Op, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{strides_of, Scalar, Tensor};

/// Gather index meaning "write zero here".
pub const GATHER_ZERO: usize = usize::MAX;

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, &[x], Op::Reshape { x })
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    ///
    /// Every layout transform (permutes, padding, crops, rolls, window
    /// partitioning) is expressed through this one op.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return shape_err(format!(
                "gather index has {} entries for output shape {shape:?}",
                index.len()
            ));
        }
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i != GATHER_ZERO && i >= src.len()) {
            return shape_err(format!("gather index {bad} out of range {}", src.len()));
        }
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { T::zero() } else { src[i] })
            .collect();
        let out = Tensor::new(shape, data)?;
        self.push(out, &[x], Op::Gather { x, index })
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (index, out_shape) = permute_index(&shape, perm)?;
        self.gather(x, index, out_shape)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return shape_err(format!("concat of {base:?} with {s:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let e = self.shape(v)[axis];
                data.extend_from_slice(&self.value(v).data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }
}

/// Gather index and output shape for an axis permutation.
pub fn permute_index(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return shape_err(format!("invalid permutation {perm:?} for rank {rank}"));
    }
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let numel: usize = shape.iter().product();
    let mut index = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    for _ in 0..numel {
        index.push(
            idx.iter()
                .zip(perm)
                .map(|(&i, &p)| i * in_strides[p])
                .sum(),
        );
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((index, out_shape))
}

pub(super) fn gather_backward<T: Scalar>(
    x: Var,
    index: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let Some(slot) = sink.slot(x) else { return };
    for (&i, &d) in index.iter().zip(g) {
        if i != GATHER_ZERO {
            slot[i] += d;
        }
    }
}

pub(super) fn concat_backward<T: Scalar>(
    graph: &Graph<T>,
    inputs: &[Var],
    axis: usize,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let base = graph.shape(inputs[0]);
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let total: usize = inputs.iter().map(|&v| graph.shape(v)[axis]).sum();
    let mut offset = 0;
    for &v in inputs {
        let e = graph.shape(v)[axis];
        if let Some(slot) = sink.slot(v) {
            for o in 0..outer {
                let src = &g[(o * total + offset) * inner..(o * total + offset + e) * inner];
                let dst = &mut slot[o * e * inner..(o + 1) * e * inner];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
            }
        }
        offset += e;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([2, 3], |i| i as f64));
        let y = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.value(y).data(), &[0., 3., 1., 4., 2., 5.]);
    }

    #[test]
    fn bad_permutation() {
        assert!(permute_index(&[2, 3], &[0, 0]).is_err());
        assert!(permute_index(&[2, 3], &[0]).is_err());
    }

    #[test]
    fn concat_channels_and_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_fn([2, 1, 2], |i| i as f64), true);
        let b = g.leaf(Tensor::from_fn([2, 2, 2], |i| 10.0 + i as f64), true);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(
            g.value(c).data(),
            &[0., 1., 10., 11., 12., 13., 2., 3., 14., 15., 16., 17.]
        );
        let w = g.constant(Tensor::from_fn([2, 3, 2], |i| i as f64));
        let p = g.mul(c, w).unwrap();
        let s = g.sum_all(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0., 1., 6., 7.]);
        assert_eq!(g.grad(b).unwrap(), &[2., 3., 4., 5., 8., 9., 10., 11.]);
    }

    #[test]
    fn gather_zero_fill_and_scatter() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64([3], &[1., 2., 3.]).unwrap(), true);
        let y = g.gather(x, vec![2, GATHER_ZERO, 2, 0], [4]).unwrap();
        assert_eq!(g.value(y).data(), &[3., 0., 3., 1.]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1., 0., 2.]);
    }
}
