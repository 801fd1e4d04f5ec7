//! Convolutional, normalization and resampling building blocks.

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::params::{ParamKind, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// He/Kaiming uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.range(-bound, bound)))
}

pub fn normal_init<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.normal() * std))
}

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = join(prefix, "weight");
        let fan_in = in_channels * kernel * kernel;
        store.register(
            &weight,
            kaiming_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            ParamKind::Weight,
        )?;
        let bias = if bias {
            let name = join(prefix, "bias");
            store.register(&name, Tensor::zeros([out_channels]), ParamKind::Bias)?;
            Some(name)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(&self.weight)?;
        let b = self.bias.as_deref().map(|n| s.param(n)).transpose()?;
        s.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed convolution with kernel = stride (no overlap).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: String,
    pub bias: Option<String>,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = join(prefix, "weight");
        // each output pixel receives exactly one tap per input channel
        store.register(
            &weight,
            kaiming_uniform(&[in_channels, out_channels, stride, stride], in_channels, rng),
            ParamKind::Weight,
        )?;
        let bias = if bias {
            let name = join(prefix, "bias");
            store.register(&name, Tensor::zeros([out_channels]), ParamKind::Bias)?;
            Some(name)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(&self.weight)?;
        let b = self.bias.as_deref().map(|n| s.param(n)).transpose()?;
        s.graph.conv_transpose2d(x, w, b, self.stride, 0)
    }
}

/// Batch normalization with running statistics (momentum 0.1, eps 1e-5).
///
/// Running variance tracks the biased batch variance so that eval mode on
/// a converged batch reproduces train mode.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        let bn = Self {
            gamma: join(prefix, "gamma"),
            beta: join(prefix, "beta"),
            running_mean: join(prefix, "running_mean"),
            running_var: join(prefix, "running_var"),
            channels,
        };
        store.register(&bn.gamma, Tensor::full([channels], T::one()), ParamKind::Norm)?;
        store.register(&bn.beta, Tensor::zeros([channels]), ParamKind::Norm)?;
        store.register_buffer(&bn.running_mean, Tensor::zeros([channels]))?;
        store.register_buffer(&bn.running_var, Tensor::full([channels], T::one()))?;
        Ok(bn)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let gamma = s.param(&self.gamma)?;
        let beta = s.param(&self.beta)?;
        if s.train {
            let (y, stats) = s.graph.batch_norm(x, gamma, beta, NORM_EPS, None)?;
            let stats = stats.expect("train mode returns batch statistics");
            let m = T::lit(BN_MOMENTUM);
            let keep = T::one() - m;
            let rm = s.store.buffer_mut(&self.running_mean)?;
            for (r, &b) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + m * b;
            }
            let rv = s.store.buffer_mut(&self.running_var)?;
            for (r, &b) in rv.data_mut().iter_mut().zip(&stats.var) {
                *r = keep * *r + m * b;
            }
            Ok(y)
        } else {
            let mean = s.store.buffer(&self.running_mean)?.data().to_vec();
            let var = s.store.buffer(&self.running_var)?.data().to_vec();
            let (y, _) = s.graph.batch_norm(x, gamma, beta, NORM_EPS, Some((&mean, &var)))?;
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize) -> Result<Self> {
        let ln = Self {
            gamma: join(prefix, "gamma"),
            beta: join(prefix, "beta"),
        };
        store.register(&ln.gamma, Tensor::full([width], T::one()), ParamKind::Norm)?;
        store.register(&ln.beta, Tensor::zeros([width]), ParamKind::Norm)?;
        Ok(ln)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let gamma = s.param(&self.gamma)?;
        let beta = s.param(&self.beta)?;
        s.graph.layer_norm(x, gamma, beta, NORM_EPS)
    }
}

/// Token-wise affine map over the last axis, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = join(prefix, "weight");
        // truncated-normal-free variant of the usual transformer init
        store.register(
            &weight,
            normal_init(&[in_features, out_features], 0.02, rng),
            ParamKind::Weight,
        )?;
        let bias = if bias {
            let name = join(prefix, "bias");
            store.register(&name, Tensor::zeros([out_features]), ParamKind::Bias)?;
            Some(name)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.last() != Some(&self.in_features) {
            return shape_err(format!(
                "linear expects last extent {}, got {shape:?}",
                self.in_features
            ));
        }
        let rows = shape.iter().rev().skip(1).product::<usize>();
        let flat = s.graph.reshape(x, [rows, self.in_features])?;
        let w = s.param(&self.weight)?;
        let mut y = s.graph.matmul(flat, w)?;
        if let Some(b) = &self.bias {
            let b = s.param(b)?;
            let b = s.graph.reshape(b, [1, self.out_features])?;
            y = s.graph.add(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.out_features;
        s.graph.reshape(y, out_shape)
    }
}

/// Conv - BN (- ReLU) unit.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(
                store,
                rng,
                &join(prefix, "conv"),
                in_channels,
                out_channels,
                kernel,
                stride,
                kernel / 2,
                false,
            )?,
            bn: BatchNorm2d::new(store, &join(prefix, "bn"), out_channels)?,
            relu,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        if self.relu {
            s.graph.relu(y)
        } else {
            Ok(y)
        }
    }
}

/// ResNet basic block: conv3x3-BN-ReLU-conv3x3-BN plus an identity or
/// 1x1-projection shortcut, then ReLU.
#[derive(Clone, Debug)]
pub struct ResNetBlock {
    pub first: ConvBn,
    pub second: ConvBn,
    pub shortcut: Option<ConvBn>,
    pub in_channels: usize,
}

impl ResNetBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Result<Self> {
        let first = ConvBn::new(store, rng, &join(prefix, "conv1"), in_channels, out_channels, 3, stride, true)?;
        let second = ConvBn::new(store, rng, &join(prefix, "conv2"), out_channels, out_channels, 3, 1, false)?;
        let shortcut = if stride != 1 || in_channels != out_channels {
            Some(ConvBn::new(
                store,
                rng,
                &join(prefix, "shortcut"),
                in_channels,
                out_channels,
                1,
                stride,
                false,
            )?)
        } else {
            None
        };
        Ok(Self {
            first,
            second,
            shortcut,
            in_channels,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let c = s.graph.shape(x).get(1).copied();
        if c != Some(self.in_channels) {
            return shape_err(format!(
                "resnet block expects {} input channels, got {:?}",
                self.in_channels,
                s.graph.shape(x)
            ));
        }
        let y = self.first.forward(s, x)?;
        let y = self.second.forward(s, y)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(s, x)?,
            None => x,
        };
        let y = s.graph.add(y, skip)?;
        s.graph.relu(y)
    }
}

/// 2x learned upsampling followed by two conv3x3-BN-ReLU layers.
#[derive(Clone, Debug)]
pub struct UpsampleBlock {
    pub up: ConvTranspose2d,
    pub conv1: ConvBn,
    pub conv2: ConvBn,
}

impl UpsampleBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            up: ConvTranspose2d::new(store, rng, &join(prefix, "up"), in_channels, out_channels, 2, true)?,
            conv1: ConvBn::new(store, rng, &join(prefix, "conv1"), out_channels, out_channels, 3, 1, true)?,
            conv2: ConvBn::new(store, rng, &join(prefix, "conv2"), out_channels, out_channels, 3, 1, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.up.forward(s, x)?;
        let y = self.conv1.forward(s, y)?;
        self.conv2.forward(s, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn rng() -> Rng {
        Rng::new(3, Purpose::Fixture)
    }

    #[test]
    fn zero_weight_block_is_relu() {
        let mut store = ParamStore::<f64>::new();
        let block = ResNetBlock::new(&mut store, &mut rng(), "blk", 4, 4, 1).unwrap();
        for p in store.params_mut() {
            if p.kind == ParamKind::Weight {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let xv = Tensor::from_fn([2, 4, 5, 5], |i| ((i * 7919) % 13) as f64 - 6.0);
        let mut s = Session::new(&mut store, true);
        let x = s.input(xv.clone());
        let y = block.forward(&mut s, x).unwrap();
        assert_eq!(s.value(y), &xv.map(|v| v.max(0.0)));
    }

    #[test]
    fn strided_block_halves() {
        let mut store = ParamStore::<f32>::new();
        let block = ResNetBlock::new(&mut store, &mut rng(), "blk", 3, 8, 2).unwrap();
        assert!(block.shortcut.is_some());
        let mut s = Session::new(&mut store, true);
        let x = s.input(Tensor::from_fn([1, 3, 64, 64], |i| (i as f32).sin()));
        let y = block.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[1, 8, 32, 32]);
    }

    #[test]
    fn upsample_doubles() {
        let mut store = ParamStore::<f32>::new();
        let up = UpsampleBlock::new(&mut store, &mut rng(), "up", 8, 4).unwrap();
        let mut s = Session::new(&mut store, true);
        let x = s.input(Tensor::from_fn([2, 8, 16, 16], |i| (i as f32 * 0.1).cos()));
        let y = up.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[2, 4, 32, 32]);
    }

    #[test]
    fn batch_norm_standardized_input_is_fixed_point() {
        // each channel already has mean 0 and variance 1
        let vals = [1.0, -1.0, 1.0, -1.0];
        let xv = Tensor::from_fn([1, 2, 2, 2], |i| vals[i % 4] * if i < 4 { 1.0 } else { -1.0 });
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let mut s = Session::new(&mut store, true);
        let x = s.input(xv.clone());
        let y = bn.forward(&mut s, x).unwrap();
        for (a, b) in s.value(y).data().iter().zip(xv.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_eval_before_training_uses_init_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1).unwrap();
        let xv = Tensor::from_f64([1, 1, 1, 2], &[3.0, -2.0]).unwrap();
        let mut s = Session::new(&mut store, false);
        let x = s.input(xv);
        let y = bn.forward(&mut s, x).unwrap();
        let k = 1.0 / (1.0f64 + NORM_EPS).sqrt();
        assert_eq!(s.value(y).data(), &[3.0 * k, -2.0 * k]);
    }

    #[test]
    fn batch_norm_eval_matches_train_after_convergence() {
        let xv = Tensor::from_fn([4, 3, 6, 6], |i| ((i * 37) % 17) as f64 * 0.3 - 2.0);
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3).unwrap();
        let train_out = {
            let mut last = None;
            for _ in 0..400 {
                let mut s = Session::new(&mut store, true);
                let x = s.input(xv.clone());
                let y = bn.forward(&mut s, x).unwrap();
                last = Some(s.value(y).clone());
            }
            last.unwrap()
        };
        let mut s = Session::new(&mut store, false);
        let x = s.input(xv);
        let y = bn.forward(&mut s, x).unwrap();
        for (a, b) in s.value(y).data().iter().zip(train_out.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn linear_over_tokens() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, &mut rng(), "fc", 3, 2, true).unwrap();
        store.get_mut("fc.weight").unwrap().tensor =
            Tensor::from_f64([3, 2], &[1., 0., 0., 1., 1., 1.]).unwrap();
        store.get_mut("fc.bias").unwrap().tensor = Tensor::from_f64([2], &[0.5, -0.5]).unwrap();
        let mut s = Session::new(&mut store, true);
        let x = s.input(Tensor::from_f64([1, 2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let y = lin.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[1, 2, 2]);
        assert_eq!(s.value(y).data(), &[4.5, 4.5, 10.5, 10.5]);
    }
}
