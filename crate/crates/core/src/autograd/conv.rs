use super::{Graph, GradSink, Op, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of a convolution between an image (`h x w`) and its sliding
/// window grid (`grid_h x grid_w`).
///
/// For `conv2d` the image is the input and the grid is the output; for the
/// transposed convolution the roles swap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// `floor((extent + 2 pad - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    (kernel <= padded && stride > 0).then(|| (padded - kernel) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
    dst: &mut [T],
) {
    let p = gh * gw;
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut dst[((c * k + ki) * k + kj) * p..][..p];
                for oy in 0..gh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let out = &mut row[oy * gw..(oy + 1) * gw];
                    if iy < 0 || iy >= h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
    dst: &mut [T],
) {
    let p = gh * gw;
    for c in 0..channels {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * p..][..p];
                for oy in 0..gh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..gw {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += row[oy * gw + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Scalar>(g: &[T], channels: usize, plane: usize, slot: &mut [T]) {
    for (i, chunk) in g.chunks(plane).enumerate() {
        slot[i % channels] += chunk.iter().copied().sum::<T>();
    }
}

impl<T: Scalar> Graph<T> {
    /// 2-D convolution: `x [N, Cin, H, W]`, `w [Cout, Cin, k, k]`,
    /// optional `b [Cout]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return shape_err(format!("conv2d of input {sx:?} with weight {sw:?}"));
        }
        if sx[1] != sw[1] {
            return shape_err(format!(
                "conv2d channel mismatch: input has {} channels, weight expects {}",
                sx[1], sw[1]
            ));
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sw[0], sw[2]);
        let (Some(ho), Some(wo)) = (
            conv_out_extent(h, k, stride, pad),
            conv_out_extent(wd, k, stride, pad),
        ) else {
            return shape_err(format!(
                "conv2d kernel {k} does not fit {h}x{wd} with padding {pad}"
            ));
        };
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return shape_err(format!("conv2d bias {:?} for {co} filters", self.shape(b)));
            }
        }
        let geom = ConvGeom {
            batch: n,
            in_channels: ci,
            out_channels: co,
            kernel: k,
            stride,
            pad,
            h,
            w: wd,
            grid_h: ho,
            grid_w: wo,
        };
        let kk = ci * k * k;
        let p = ho * wo;
        let mut cols = vec![T::zero(); n * kk * p];
        let mut out = vec![T::zero(); n * co * p];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        for i in 0..n {
            let col = &mut cols[i * kk * p..(i + 1) * kk * p];
            im2col(&xd[i * ci * h * wd..(i + 1) * ci * h * wd], ci, h, wd, k, stride, pad, ho, wo, col);
            T::gemm(
                co,
                kk,
                p,
                T::one(),
                wdata,
                (kk as isize, 1),
                col,
                (p as isize, 1),
                T::zero(),
                &mut out[i * co * p..(i + 1) * co * p],
                (p as isize, 1),
            );
        }
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data(), p);
        }
        let out = Tensor::new([n, co, ho, wo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, &inputs, Op::Conv2d { x, w, b, geom, cols })
    }

    /// Transposed convolution: `x [N, Cin, H, W]`, `w [Cin, Cout, k, k]`,
    /// output extent `(H - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sx[1] != sw[0] {
            return shape_err(format!("conv_transpose2d of input {sx:?} with weight {sw:?}"));
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sw[1], sw[2]);
        let ho = ((h - 1) * stride + k).checked_sub(2 * pad);
        let wo = ((wd - 1) * stride + k).checked_sub(2 * pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return shape_err("conv_transpose2d padding exceeds output");
        };
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return shape_err(format!("conv_transpose2d bias {:?} for {co} filters", self.shape(b)));
            }
        }
        // image = output (ho x wo), grid = input (h x wd)
        let geom = ConvGeom {
            batch: n,
            in_channels: ci,
            out_channels: co,
            kernel: k,
            stride,
            pad,
            h: ho,
            w: wo,
            grid_h: h,
            grid_w: wd,
        };
        let kk = co * k * k;
        let p = h * wd;
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let mut cols = vec![T::zero(); kk * p];
        let mut out = vec![T::zero(); n * co * ho * wo];
        for i in 0..n {
            // cols = W^T . x[i]
            T::gemm(
                kk,
                ci,
                p,
                T::one(),
                wdata,
                (1, kk as isize),
                &xd[i * ci * p..(i + 1) * ci * p],
                (p as isize, 1),
                T::zero(),
                &mut cols,
                (p as isize, 1),
            );
            col2im(&cols, co, ho, wo, k, stride, pad, h, wd, &mut out[i * co * ho * wo..(i + 1) * co * ho * wo]);
        }
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data(), ho * wo);
        }
        let out = Tensor::new([n, co, ho, wo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, &inputs, Op::ConvTranspose2d { x, w, b, geom })
    }

    /// Max pooling with a square window; ties go to the first element in
    /// row-major window order.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("max_pool2d of {s:?}"));
        }
        let (Some(ho), Some(wo)) = (
            conv_out_extent(s[2], kernel, stride, 0),
            conv_out_extent(s[3], kernel, stride, 0),
        ) else {
            return shape_err(format!("pool window {kernel} larger than {}x{}", s[2], s[3]));
        };
        let (h, w) = (s[2], s[3]);
        let data = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for pl in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = pl * h * w + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = pl * h * w + (oy * stride + ky) * w + ox * stride + kx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new([s[0], s[1], ho, wo], out)?;
        self.push(out, &[x], Op::MaxPool2d { x, argmax })
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward<T: Scalar>(
    graph: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeom,
    cols: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let ConvGeom {
        batch: n,
        in_channels: ci,
        out_channels: co,
        kernel: k,
        stride,
        pad,
        h,
        w: wd,
        grid_h: ho,
        grid_w: wo,
    } = *geom;
    let kk = ci * k * k;
    let p = ho * wo;
    if let Some(gw) = sink.slot(w) {
        for i in 0..n {
            // dW += dY[i] . cols[i]^T
            T::gemm(
                co,
                p,
                kk,
                T::one(),
                &g[i * co * p..(i + 1) * co * p],
                (p as isize, 1),
                &cols[i * kk * p..(i + 1) * kk * p],
                (1, p as isize),
                T::one(),
                gw,
                (kk as isize, 1),
            );
        }
    }
    if let Some(b) = b {
        if let Some(gb) = sink.slot(b) {
            bias_grad(g, co, p, gb);
        }
    }
    let wdata = graph.value(w).data();
    if let Some(gx) = sink.slot(x) {
        let mut dcols = vec![T::zero(); kk * p];
        for i in 0..n {
            // dcols = W^T . dY[i]
            T::gemm(
                kk,
                co,
                p,
                T::one(),
                wdata,
                (1, kk as isize),
                &g[i * co * p..(i + 1) * co * p],
                (p as isize, 1),
                T::zero(),
                &mut dcols,
                (p as isize, 1),
            );
            col2im(&dcols, ci, h, wd, k, stride, pad, ho, wo, &mut gx[i * ci * h * wd..(i + 1) * ci * h * wd]);
        }
    }
}

pub(super) fn conv_transpose2d_backward<T: Scalar>(
    graph: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeom,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let ConvGeom {
        batch: n,
        in_channels: ci,
        out_channels: co,
        kernel: k,
        stride,
        pad,
        h: ho,
        w: wo,
        grid_h: h,
        grid_w: wd,
    } = *geom;
    let kk = co * k * k;
    let p = h * wd;
    let want_x = sink.wants(x);
    let want_w = sink.wants(w);
    if let Some(b) = b {
        if let Some(gb) = sink.slot(b) {
            bias_grad(g, co, ho * wo, gb);
        }
    }
    if !want_x && !want_w {
        return;
    }
    let xd = graph.value(x).data();
    let wdata = graph.value(w).data();
    let mut gcols = vec![T::zero(); kk * p];
    for i in 0..n {
        im2col(&g[i * co * ho * wo..(i + 1) * co * ho * wo], co, ho, wo, k, stride, pad, h, wd, &mut gcols);
        if let Some(gx) = sink.slot(x) {
            // dx[i] = W . gcols
            T::gemm(
                ci,
                kk,
                p,
                T::one(),
                wdata,
                (kk as isize, 1),
                &gcols,
                (p as isize, 1),
                T::one(),
                &mut gx[i * ci * p..(i + 1) * ci * p],
                (p as isize, 1),
            );
        }
        if let Some(gw) = sink.slot(w) {
            // dW += x[i] . gcols^T
            T::gemm(
                ci,
                p,
                kk,
                T::one(),
                &xd[i * ci * p..(i + 1) * ci * p],
                (p as isize, 1),
                &gcols,
                (1, p as isize),
                T::one(),
                gw,
                (kk as isize, 1),
            );
        }
    }
}

pub(super) fn max_pool_backward<T: Scalar>(
    x: Var,
    argmax: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if let Some(slot) = sink.slot(x) {
        for (&i, &d) in argmax.iter().zip(g) {
            slot[i] += d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn out_extent_formula() {
        assert_eq!(conv_out_extent(64, 3, 2, 1), Some(32));
        assert_eq!(conv_out_extent(5, 3, 1, 0), Some(3));
        assert_eq!(conv_out_extent(2, 5, 1, 1), None);
    }

    #[test]
    fn one_by_one_ones_is_identity() {
        let mut g = Graph::<f64>::new();
        let xv = Tensor::from_fn([1, 1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let x = g.constant(xv.clone());
        let w = g.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), &xv);
    }

    #[test]
    fn hand_computed_diagonal_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 1, 3, 3], |i| (i + 1) as f64));
        let w = g.constant(Tensor::from_f64([1, 1, 2, 2], &[1., 0., 0., 1.]).unwrap());
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[6., 8., 12., 14.]);
    }

    #[test]
    fn channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros([3, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn kernel_too_large() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let w = g.constant(Tensor::zeros([1, 1, 5, 5]));
        assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_one_hot_scatters() {
        // one-hot 2x2 kernel at (0,0): each input pixel lands on the top-left
        // corner of its 2x2 output block.
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        let w = g.constant(Tensor::from_f64([1, 1, 2, 2], &[1., 0., 0., 0.]).unwrap());
        let y = g.conv_transpose2d(x, w, None, 2, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = [
            1., 0., 2., 0.,
            0., 0., 0., 0.,
            3., 0., 4., 0.,
            0., 0., 0., 0.,
        ];
        assert_eq!(g.value(y).data(), &expected);

        // all-ones kernel gives nearest-neighbour upsampling
        let ones = g.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let y = g.conv_transpose2d(x, ones, None, 2, 0).unwrap();
        assert_eq!(g.value(y).at(&[0, 0, 1, 1]), 1.0);
        assert_eq!(g.value(y).at(&[0, 0, 3, 2]), 4.0);
        assert_eq!(g.value(y).at(&[0, 0, 0, 3]), 2.0);
    }

    #[test]
    fn max_pool_first_argmax() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(
            Tensor::from_f64([1, 1, 2, 4], &[1., 3., 2., 2., 3., 0., 2., 2.]).unwrap(),
            true,
        );
        let y = g.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3., 2.]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0., 1., 1., 0., 0., 0., 0., 0.]);
    }
}
