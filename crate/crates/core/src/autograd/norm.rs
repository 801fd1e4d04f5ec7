use super::{Graph, GradSink, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Batch statistics computed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
}

impl<T: Scalar> Graph<T> {
    /// Per-channel normalization of `x [N, C, H, W]`.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the given `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("batch_norm expects [N, C, H, W], got {s:?}"));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!(
                "batch_norm affine shapes {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let population = n * plane;
        let data = self.value(x).data();
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return shape_err("running statistics length differs from channel count");
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if population < 2 {
                    return Err(Error::Domain(format!(
                        "batch_norm in train mode needs at least 2 values per channel, got {population}"
                    )));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv = T::one() / T::lit(population as f64);
                for (ch, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let planes = (0..n).map(|i| &data[(i * c + ch) * plane..(i * c + ch + 1) * plane]);
                    let total: T = planes.clone().flatten().copied().sum();
                    *m = total * inv;
                    let sq: T = planes.flatten().map(|&e| (e - *m) * (e - *m)).sum();
                    *v = sq * inv;
                }
                (mean, var, true)
            }
        };
        let eps = T::lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for (p, (src, (xh, o))) in data
            .chunks(plane)
            .zip(xhat.chunks_mut(plane).zip(out.chunks_mut(plane)))
            .enumerate()
        {
            let ch = p % c;
            for i in 0..plane {
                xh[i] = (src[i] - mean[ch]) * inv_std[ch];
                o[i] = gd[ch] * xh[i] + bd[ch];
            }
        }
        let out = Tensor::new(s, out)?;
        let v = self.push(
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )?;
        Ok((v, batch_stats.then_some(BatchStats { mean, var })))
    }

    /// Normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some(&c) = s.last() else {
            return shape_err("layer_norm of a rank-0 tensor");
        };
        if c == 0 {
            return shape_err("layer_norm over an empty axis");
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!(
                "layer_norm affine shapes {:?}/{:?} for width {c}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let data = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let eps = T::lit(eps);
        let inv_c = T::one() / T::lit(c as f64);
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        let mut inv_std = Vec::with_capacity(data.len() / c);
        for ((row, xh), o) in data.chunks(c).zip(xhat.chunks_mut(c)).zip(out.chunks_mut(c)) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() * inv_c;
            let is = T::one() / (var + eps).sqrt();
            for i in 0..c {
                xh[i] = (row[i] - mean) * is;
                o[i] = gd[i] * xh[i] + bd[i];
            }
            inv_std.push(is);
        }
        let out = Tensor::new(s, out)?;
        self.push(
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn batch_norm_backward<T: Scalar>(
    graph: &Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    batch_stats: bool,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let s = graph.shape(x);
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (p, (gc, xc)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
        let ch = p % c;
        for i in 0..plane {
            sum_g[ch] += gc[i];
            sum_gx[ch] += gc[i] * xc[i];
        }
    }
    if let Some(gg) = sink.slot(gamma) {
        gg.iter_mut().zip(&sum_gx).for_each(|(a, &b)| *a += b);
    }
    if let Some(gb) = sink.slot(beta) {
        gb.iter_mut().zip(&sum_g).for_each(|(a, &b)| *a += b);
    }
    let gd = graph.value(gamma).data();
    let Some(gx) = sink.slot(x) else { return };
    let m = T::lit((n * plane) as f64);
    for (p, ((gc, xc), dst)) in g
        .chunks(plane)
        .zip(xhat.chunks(plane))
        .zip(gx.chunks_mut(plane))
        .enumerate()
    {
        let ch = p % c;
        let k = gd[ch] * inv_std[ch];
        if batch_stats {
            let mean_g = sum_g[ch] / m;
            let mean_gx = sum_gx[ch] / m;
            for i in 0..plane {
                dst[i] += k * (gc[i] - mean_g - xc[i] * mean_gx);
            }
        } else {
            for i in 0..plane {
                dst[i] += k * gc[i];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn layer_norm_backward<T: Scalar>(
    graph: &Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let c = *graph.shape(x).last().expect("checked in forward");
    if let Some(gg) = sink.slot(gamma) {
        for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
            for i in 0..c {
                gg[i] += gr[i] * xr[i];
            }
        }
    }
    if let Some(gb) = sink.slot(beta) {
        for gr in g.chunks(c) {
            gb.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
        }
    }
    let gd = graph.value(gamma).data();
    let Some(gx) = sink.slot(x) else { return };
    let inv_c = T::one() / T::lit(c as f64);
    let mut dxhat = vec![T::zero(); c];
    for (((gr, xr), dst), &is) in g
        .chunks(c)
        .zip(xhat.chunks(c))
        .zip(gx.chunks_mut(c))
        .zip(inv_std)
    {
        let mut sum = T::zero();
        let mut sum_x = T::zero();
        for i in 0..c {
            dxhat[i] = gr[i] * gd[i];
            sum += dxhat[i];
            sum_x += dxhat[i] * xr[i];
        }
        let (mean, mean_x) = (sum * inv_c, sum_x * inv_c);
        for i in 0..c {
            dst[i] += is * (dxhat[i] - mean - xr[i] * mean_x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(g: &mut Graph<f64>, c: usize) -> (Var, Var) {
        (
            g.constant(Tensor::full([c], 1.0)),
            g.constant(Tensor::zeros([c])),
        )
    }

    #[test]
    fn layer_norm_constant_token_centers_to_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([1, 3], 2.0));
        let (ga, be) = affine(&mut g, 3);
        let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_unit_variance_fixed_point() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([1, 2], &[1.0, -1.0]).unwrap());
        let (ga, be) = affine(&mut g, 2);
        let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
        let v = g.value(y).data();
        // 1 / sqrt(1 + 1e-5)
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((v[0] - expected).abs() < 1e-12);
        assert!((v[1] + expected).abs() < 1e-12);
        assert!((v[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn batch_norm_constant_channel_gives_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([2, 2, 3, 3], |i| if (i / 9) % 2 == 0 { 4.0 } else { -1.5 }));
        let ga = g.constant(Tensor::from_f64([2], &[2.0, 3.0]).unwrap());
        let be = g.constant(Tensor::from_f64([2], &[0.25, -0.75]).unwrap());
        let (y, _) = g.batch_norm(x, ga, be, 1e-5, None).unwrap();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            let expected = if (i / 9) % 2 == 0 { 0.25 } else { -0.75 };
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn batch_norm_output_moments() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([3, 4, 5, 5], |i| (i as f64 * 0.73).sin() * 3.0 + 1.0));
        let (ga, be) = affine(&mut g, 4);
        let (y, stats) = g.batch_norm(x, ga, be, 1e-5, None).unwrap();
        assert!(stats.is_some());
        let v = g.value(y);
        for ch in 0..4 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..25).map(move |p| (n, p)))
                .map(|(n, p)| v.data()[(n * 4 + ch) * 25 + p])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_needs_population() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 2, 1, 1]));
        let (ga, be) = affine(&mut g, 2);
        assert!(matches!(g.batch_norm(x, ga, be, 1e-5, None), Err(Error::Domain(_))));
        // eval mode has no such requirement
        let m = [0.0, 0.0];
        let v = [1.0, 1.0];
        assert!(g.batch_norm(x, ga, be, 1e-5, Some((&m, &v))).is_ok());
    }
}
