use super::{Graph, GradSink, Op, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

impl<T: Scalar> Graph<T> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let out = Tensor::new([m, n], out)?;
        self.push(out, &[a, b], Op::MatMul { a, b })
    }

    /// Batched product: `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T`
    /// when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(format!("bmm of {sa:?} and {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err(format!(
                "bmm inner dimensions differ: {sa:?} x {sb:?} (transpose_b = {transpose_b})"
            ));
        }
        let b_strides = if transpose_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &da[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &db[i * k * n..(i + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        let out = Tensor::new([batch, m, n], out)?;
        self.push(out, &[a, b], Op::BatchMatMul { a, b, transpose_b })
    }
}

pub(super) fn matmul_backward<T: Scalar>(
    graph: &Graph<T>,
    a: Var,
    b: Var,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (m, k) = (graph.shape(a)[0], graph.shape(a)[1]);
    let n = graph.shape(b)[1];
    if let Some(ga) = sink.slot(a) {
        // dA = dY . B^T
        T::gemm(
            m,
            n,
            k,
            T::one(),
            g,
            (n as isize, 1),
            graph.value(b).data(),
            (1, n as isize),
            T::one(),
            ga,
            (k as isize, 1),
        );
    }
    if let Some(gb) = sink.slot(b) {
        // dB = A^T . dY
        T::gemm(
            k,
            m,
            n,
            T::one(),
            graph.value(a).data(),
            (1, k as isize),
            g,
            (n as isize, 1),
            T::one(),
            gb,
            (n as isize, 1),
        );
    }
}

pub(super) fn bmm_backward<T: Scalar>(
    graph: &Graph<T>,
    a: Var,
    b: Var,
    transpose_b: bool,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let sa = graph.shape(a);
    let (batch, m, k) = (sa[0], sa[1], sa[2]);
    let n = g.len() / (batch * m);
    let (da, db) = (graph.value(a).data(), graph.value(b).data());
    if let Some(ga) = sink.slot(a) {
        for i in 0..batch {
            let gi = &g[i * m * n..(i + 1) * m * n];
            let bi = &db[i * k * n..(i + 1) * k * n];
            // dA = dY . B^T, where B is [k, n] (or stored [n, k] when transposed)
            let b_strides = if transpose_b {
                (k as isize, 1)
            } else {
                (1, n as isize)
            };
            T::gemm(
                m,
                n,
                k,
                T::one(),
                gi,
                (n as isize, 1),
                bi,
                b_strides,
                T::one(),
                &mut ga[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
            );
        }
    }
    if let Some(gb) = sink.slot(b) {
        for i in 0..batch {
            let gi = &g[i * m * n..(i + 1) * m * n];
            let ai = &da[i * m * k..(i + 1) * m * k];
            let out = &mut gb[i * k * n..(i + 1) * k * n];
            if transpose_b {
                // dB [n, k] = dY^T . A
                T::gemm(
                    n,
                    m,
                    k,
                    T::one(),
                    gi,
                    (1, n as isize),
                    ai,
                    (k as isize, 1),
                    T::one(),
                    out,
                    (k as isize, 1),
                );
            } else {
                // dB [k, n] = A^T . dY
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    ai,
                    (1, k as isize),
                    gi,
                    (n as isize, 1),
                    T::one(),
                    out,
                    (n as isize, 1),
                );
            }
        }
    }
}
