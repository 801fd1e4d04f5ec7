use super::{Fault, Graph, GradSink, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{strides_of, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    pub fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    /// Tanh approximation `0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))`.
    Gelu,
    Exp,
    Log,
    Relu,
    Scale(f64),
    AddScalar(f64),
}

impl UnaryKind {
    pub fn name(self) -> &'static str {
        match self {
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Relu => "relu",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::AddScalar(_) => "add_scalar",
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_K) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// Broadcast plan for two operands of equal rank (lower-rank operands are
/// left-padded with unit extents).
pub(crate) struct Broadcast {
    pub(crate) out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

fn padded(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1; rank - shape.len()];
    out.extend_from_slice(shape);
    out
}

fn effective_strides(shape: &[usize]) -> Vec<usize> {
    strides_of(shape)
        .into_iter()
        .zip(shape)
        .map(|(s, &e)| if e == 1 { 0 } else { s })
        .collect()
}

impl Broadcast {
    pub(crate) fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let a = padded(a, rank);
        let b = padded(b, rank);
        let mut out_shape = Vec::with_capacity(rank);
        for (&ea, &eb) in a.iter().zip(&b) {
            let e = if ea == eb {
                ea
            } else if ea == 1 {
                eb
            } else if eb == 1 {
                ea
            } else {
                return shape_err(format!("cannot broadcast {a:?} with {b:?}"));
            };
            out_shape.push(e);
        }
        Ok(Self {
            out_shape,
            a_strides: effective_strides(&a),
            b_strides: effective_strides(&b),
        })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in
    /// row-major order.
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let numel: usize = self.out_shape.iter().product();
        if numel == 0 {
            return;
        }
        let inner = self.out_shape[rank - 1];
        let (sa, sb) = (self.a_strides[rank - 1], self.b_strides[rank - 1]);
        let mut idx = vec![0usize; rank - 1];
        let (mut oa, mut ob) = (0usize, 0usize);
        let mut o = 0;
        loop {
            for j in 0..inner {
                f(o + j, oa + j * sa, ob + j * sb);
            }
            o += inner;
            // odometer over the outer dimensions
            let mut d = rank - 1;
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                idx[d] += 1;
                oa += self.a_strides[d];
                ob += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                oa -= self.a_strides[d] * idx[d];
                ob -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else {
            let plan = Broadcast::new(va.shape(), vb.shape())?;
            let mut data = vec![T::zero(); plan.out_shape.iter().product()];
            let (da, db) = (va.data(), vb.data());
            plan.for_each(|o, ia, ib| data[o] = f(da[ia], db[ib]));
            Tensor::new(plan.out_shape, data)?
        };
        self.push(out, &[a, b], Op::Binary { kind, a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let v = self.value(x);
        if kind == UnaryKind::Log {
            if let Some(bad) = v.data().iter().find(|&&e| e <= T::zero()) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let out = match kind {
            UnaryKind::Tanh => v.map(|e| e.tanh()),
            UnaryKind::Sigmoid => v.map(sigmoid),
            UnaryKind::Gelu => v.map(gelu),
            UnaryKind::Exp => v.map(|e| e.exp()),
            UnaryKind::Log => v.map(|e| e.ln()),
            UnaryKind::Relu => v.map(|e| if e > T::zero() { e } else { T::zero() }),
            UnaryKind::Scale(c) => {
                let c = T::lit(c);
                v.map(|e| e * c)
            }
            UnaryKind::AddScalar(c) => {
                let c = T::lit(c);
                v.map(|e| e + c)
            }
        };
        self.push(out, &[x], Op::Unary { kind, x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), x)
    }
}

/// Sums `g` (shaped like the broadcast output) back down to an operand.
fn reduce_to<T: Scalar>(
    plan: &Broadcast,
    g: &[T],
    operand_len: usize,
    pick_a: bool,
    weight: impl Fn(usize, usize, usize) -> T,
) -> Vec<T> {
    let mut out = vec![T::zero(); operand_len];
    plan.for_each(|o, ia, ib| {
        let i = if pick_a { ia } else { ib };
        out[i] += g[o] * weight(o, ia, ib);
    });
    out
}

pub(super) fn binary_backward<T: Scalar>(
    graph: &Graph<T>,
    kind: BinaryKind,
    a: Var,
    b: Var,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (va, vb) = (graph.value(a), graph.value(b));
    let same = va.shape() == vb.shape();
    let (da, db) = (va.data(), vb.data());

    let ga: Option<Vec<T>> = sink.wants(a).then(|| match (kind, same) {
        (BinaryKind::Add | BinaryKind::Sub, true) => g.to_vec(),
        (BinaryKind::Mul, true) => g.iter().zip(db).map(|(&d, &y)| d * y).collect(),
        (k, false) => {
            let plan = Broadcast::new(va.shape(), vb.shape()).expect("validated in forward");
            reduce_to(&plan, g, da.len(), true, |_, _, ib| match k {
                BinaryKind::Mul => db[ib],
                _ => T::one(),
            })
        }
    });
    if let Some(ga) = ga {
        sink.add(a, &ga);
    }

    let gb: Option<Vec<T>> = sink.wants(b).then(|| match (kind, same) {
        (BinaryKind::Add, true) => g.to_vec(),
        (BinaryKind::Sub, true) => g.iter().map(|&d| -d).collect(),
        (BinaryKind::Mul, true) => g.iter().zip(da).map(|(&d, &x)| d * x).collect(),
        (k, false) => {
            let plan = Broadcast::new(va.shape(), vb.shape()).expect("validated in forward");
            reduce_to(&plan, g, db.len(), false, |_, ia, _| match k {
                BinaryKind::Add => T::one(),
                BinaryKind::Sub => -T::one(),
                BinaryKind::Mul => da[ia],
            })
        }
    });
    if let Some(gb) = gb {
        sink.add(b, &gb);
    }
}

pub(super) fn unary_backward<T: Scalar>(
    graph: &Graph<T>,
    kind: UnaryKind,
    x: Var,
    out: &Tensor<T>,
    g: &[T],
    fault: Option<Fault>,
    sink: &mut GradSink<'_, T>,
) {
    let xs = graph.value(x).data();
    let ys = out.data();
    let one = T::one();
    let tanh_scale = if fault == Some(Fault::TanhBackward) {
        T::lit(1.1)
    } else {
        one
    };
    let Some(slot) = sink.slot(x) else { return };
    for i in 0..g.len() {
        let d = match kind {
            UnaryKind::Tanh => (one - ys[i] * ys[i]) * tanh_scale,
            UnaryKind::Sigmoid => ys[i] * (one - ys[i]),
            UnaryKind::Gelu => gelu_grad(xs[i]),
            UnaryKind::Exp => ys[i],
            UnaryKind::Log => one / xs[i],
            UnaryKind::Relu => {
                if xs[i] > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            UnaryKind::Scale(c) => T::lit(c),
            UnaryKind::AddScalar(_) => one,
        };
        slot[i] += g[i] * d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn fixed_points() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[1], &[0.0]));
        let th = g.tanh(z).unwrap();
        let sg = g.sigmoid(z).unwrap();
        assert_eq!(g.value(th).data(), &[0.0]);
        assert_eq!(g.value(sg).data(), &[0.5]);
    }

    #[test]
    fn tanh_saturates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[50.0]), true);
        let y = g.tanh(x).unwrap();
        let v = g.value(y).data()[0];
        assert!(v > 1.0 - 1e-9 && v <= 1.0);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        let analytic = g.grad(x).unwrap()[0];
        let h = 1e-3;
        let fd = ((50.0f64 + h).tanh() - (50.0f64 - h).tanh()) / (2.0 * h);
        assert!(analytic.abs() < 1e-6);
        assert!((analytic - fd).abs() < 1e-6);
    }

    #[test]
    fn log_domain_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
        let y = g.constant(t(&[1], &[-3.0]));
        assert!(matches!(g.log(y), Err(Error::Domain(_))));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcast_bias_row() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let b = g.leaf(t(&[1, 3], &[10., 20., 30.]), true);
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11., 22., 33., 14., 25., 36.]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2., 2., 2.]);
        assert_eq!(g.grad(a).unwrap().len(), 6);
    }

    #[test]
    fn broadcast_middle_axis_mul() {
        // [2,1,2] * [2,3,2]
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 1, 2], &[1., 2., 3., 4.]), true);
        let b = g.leaf(Tensor::from_fn([2, 3, 2], |i| i as f64), true);
        let y = g.mul(a, b).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 2]);
        assert_eq!(g.value(y).at(&[1, 2, 1]), 4.0 * 11.0);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        // d/da[0,0,0] = b[0,0,0]+b[0,1,0]+b[0,2,0] = 0+2+4
        assert_eq!(g.grad(a).unwrap(), &[6., 9., 24., 27.]);
        assert_eq!(g.grad(b).unwrap()[11], 4.0);
    }

    #[test]
    fn rank_padding_broadcast() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2], &[10., 20.]));
        let y = g.sub(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[-9., -18., -7., -16.]);
    }
}
