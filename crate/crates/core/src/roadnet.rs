//! The full segmentation network: encoder, gated skip connections,
//! decoder and sigmoid head.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::cfilter::{CFilter, DEFAULT_KERNEL};
use crate::encoder::{Encoder, Fusion, ENCODER_STRIDE};
use crate::error::{shape_err, Error, Result};
use crate::metrics::BinaryMask;
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, UpsampleBlock};
use crate::params::{ParamStore, Session};
use crate::rng::{Purpose, Rng};
use crate::tensor::{DType, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub tile_size: usize,
    pub widths: [usize; 3],
    pub window_size: usize,
    pub num_heads: usize,
    pub res_blocks: usize,
    pub cfilter_kernel: usize,
    pub fusion: Fusion,
    pub use_coswin: bool,
    pub use_cfilter: bool,
    pub dtype: DType,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            tile_size: 64,
            widths: [32, 64, 128],
            window_size: 4,
            num_heads: 2,
            res_blocks: 2,
            cfilter_kernel: DEFAULT_KERNEL,
            fusion: Fusion::Tanh,
            use_coswin: true,
            use_cfilter: true,
            dtype: DType::F32,
        }
    }
}

/// Which of the two contributions are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Neither: plain residual U-Net.
    None,
    /// CoSwin stages only.
    Coswin,
    /// Context-guided filters only.
    Cfilter,
    /// Full model.
    Both,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Both, Ablation::Coswin, Ablation::Cfilter, Ablation::None];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Ablation::None => (false, false),
            Ablation::Coswin => (true, false),
            Ablation::Cfilter => (false, true),
            Ablation::Both => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "baseline",
            Ablation::Coswin => "coswin-only",
            Ablation::Cfilter => "cfilter-only",
            Ablation::Both => "full",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "coswin" => Ok(Ablation::Coswin),
            "cfilter" => Ok(Ablation::Cfilter),
            "both" => Ok(Ablation::Both),
            other => Err(Error::Config(format!("unknown ablation `{other}` (none|coswin|cfilter|both)"))),
        }
    }
}

impl NetworkConfig {
    /// Larger widths intended for 512x512 tiles.
    pub fn full_scale() -> Self {
        Self {
            tile_size: 512,
            widths: [64, 128, 256],
            ..Self::default()
        }
    }

    /// Narrow, shallow variant that keeps CPU training runs short.
    pub fn compact() -> Self {
        Self {
            widths: [8, 16, 32],
            res_blocks: 1,
            ..Self::default()
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        (self.use_coswin, self.use_cfilter) = ablation.flags();
        self
    }

    pub fn ablation(&self) -> Ablation {
        match (self.use_coswin, self.use_cfilter) {
            (false, false) => Ablation::None,
            (true, false) => Ablation::Coswin,
            (false, true) => Ablation::Cfilter,
            (true, true) => Ablation::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || self.tile_size % ENCODER_STRIDE != 0 {
            return Err(Error::Config(format!(
                "tile_size {} must be a positive multiple of {ENCODER_STRIDE}",
                self.tile_size
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if let Some(w) = self.widths.iter().find(|&&w| self.num_heads == 0 || w % self.num_heads != 0) {
            return Err(Error::Config(format!(
                "stage width {w} is not divisible by num_heads {}",
                self.num_heads
            )));
        }
        if self.window_size < 2 {
            return Err(Error::Config("window_size must be at least 2".into()));
        }
        if self.res_blocks == 0 {
            return Err(Error::Config("res_blocks must be at least 1".into()));
        }
        if self.cfilter_kernel % 2 == 0 {
            return Err(Error::Config(format!("cfilter_kernel {} must be odd", self.cfilter_kernel)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RoadNet {
    pub cfg: NetworkConfig,
    pub encoder: Encoder,
    /// Deepest first: bottleneck->skip3, ->skip2, ->skip1.
    pub decoder: Vec<UpsampleBlock>,
    pub filters: Option<Vec<CFilter>>,
    pub head_up: ConvTranspose2d,
    pub head_bn: BatchNorm2d,
    pub head: Conv2d,
}

impl RoadNet {
    /// Builds the network and registers its parameters in `store`, drawing
    /// initial values from the `Init` stream of `seed`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = &mut Rng::new(seed, Purpose::Init);
        let [w0, w1, w2] = cfg.widths;
        let encoder = Encoder::new(
            store,
            rng,
            cfg.widths,
            cfg.window_size,
            cfg.num_heads,
            cfg.res_blocks,
            cfg.fusion,
            cfg.use_coswin,
        )?;
        let pairs = [(w2, w1), (w1, w0), (w0, w0)];
        let mut decoder = Vec::with_capacity(3);
        for (i, &(cin, cout)) in pairs.iter().enumerate() {
            decoder.push(UpsampleBlock::new(store, rng, &format!("decoder.up{}", 3 - i), cin, cout)?);
        }
        let filters = if cfg.use_cfilter {
            let mut f = Vec::with_capacity(3);
            for i in 0..3 {
                f.push(CFilter::new(store, rng, &format!("cfilter.skip{}", 3 - i), cfg.cfilter_kernel)?);
            }
            Some(f)
        } else {
            None
        };
        let head_up = ConvTranspose2d::new(store, rng, "head.up", w0, w0, 2, false)?;
        let head_bn = BatchNorm2d::new(store, "head.bn", w0)?;
        let head = Conv2d::new(store, rng, "head.out", w0, 1, 1, 1, 0, true)?;
        log::debug!(
            "built network {:?}: {} tensors, {} scalars",
            cfg.ablation(),
            store.len(),
            store.num_scalars()
        );
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            filters,
            head_up,
            head_bn,
            head,
        })
    }

    /// Road probabilities `[N, 1, H, W]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, image: Var) -> Result<Var> {
        let shape = s.graph.shape(image).to_vec();
        let t = self.cfg.tile_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != t || shape[3] != t {
            return shape_err(format!("network expects [N, 3, {t}, {t}], got {shape:?}"));
        }
        let enc = self.encoder.encode(s, image)?;
        let mut x = enc.bottleneck;
        for (i, up) in self.decoder.iter().enumerate() {
            let skip = enc.skips[2 - i];
            x = up.forward(s, x)?;
            x = match &self.filters {
                Some(f) => f[i].forward(s, skip, x)?,
                None => s.graph.add(skip, x)?,
            };
        }
        let x = self.head_up.forward(s, x)?;
        let x = self.head_bn.forward(s, x)?;
        let x = s.graph.relu(x)?;
        let logits = self.head.forward(s, x)?;
        s.graph.sigmoid(logits)
    }
}

/// Registers a fresh network for `cfg` and returns the store, whose names
/// are sorted and unique.
pub fn parameter_registry<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<(RoadNet, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let net = RoadNet::new(&mut store, cfg, seed)?;
    log::info!("parameter registry: {} tensors, {} scalars", store.len(), store.num_scalars());
    Ok((net, store))
}

/// `prob >= threshold`, as 0/1 values.
pub fn predict_mask<T: Scalar>(prob: &Tensor<T>, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} must lie in (0, 1)")));
    }
    let t = T::lit(threshold);
    BinaryMask::new(prob.shape().to_vec(), prob.data().iter().map(|&p| p >= t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            tile_size: 32,
            widths: [4, 8, 8],
            window_size: 2,
            num_heads: 2,
            res_blocks: 1,
            ..NetworkConfig::default()
        }
    }

    fn image(n: usize, t: usize, seed: u64) -> Tensor<f64> {
        let mut r = Rng::new(seed, Purpose::Fixture);
        Tensor::from_fn([n, 3, t, t], |_| r.uniform())
    }

    #[test]
    fn ablation_lattice_shapes_and_range() {
        let mut counts = Vec::new();
        for ab in Ablation::ALL {
            let cfg = tiny().with_ablation(ab);
            let (net, mut store) = parameter_registry::<f64>(&cfg, 1).unwrap();
            counts.push(store.num_scalars());
            if !cfg.use_cfilter {
                assert!(store.names().iter().all(|n| !n.starts_with("cfilter.")));
            }
            let mut s = Session::new(&mut store, true);
            let x = s.input(image(2, 32, 0));
            let y = net.forward(&mut s, x).unwrap();
            assert_eq!(s.graph.shape(y), &[2, 1, 32, 32]);
            assert!(s.value(y).data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
        assert_ne!(counts[0], counts[3]);
    }

    #[test]
    fn registry_is_deterministic() {
        let (_, a) = parameter_registry::<f32>(&tiny(), 9).unwrap();
        let (_, b) = parameter_registry::<f32>(&tiny(), 9).unwrap();
        assert_eq!(a.names(), b.names());
        for (p, q) in a.params().zip(b.params()) {
            assert_eq!(p.tensor, q.tensor);
        }
    }

    #[test]
    fn wrong_tile_size_is_shape_error() {
        let (net, mut store) = parameter_registry::<f64>(&tiny(), 0).unwrap();
        let mut s = Session::new(&mut store, false);
        let x = s.input(image(1, 48, 0));
        assert!(matches!(net.forward(&mut s, x), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.tile_size = 60;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = tiny();
        let (net, mut store) = parameter_registry::<f64>(&cfg, 4).unwrap();
        loss::register_task_weights(&mut store).unwrap();
        let mut r = Rng::new(5, Purpose::Fixture);
        let target = Tensor::from_fn([2, 1, 32, 32], |_| (r.uniform() < 0.2) as u8 as f64);
        let mut s = Session::new(&mut store, true);
        let x = s.input(image(2, 32, 1));
        let p = net.forward(&mut s, x).unwrap();
        let w = loss::wbce(&mut s, p, &target, 1.5).unwrap();
        let l2 = loss::l2_penalty(&mut s).unwrap();
        let (s1, s2) = (s.param(loss::S1).unwrap(), s.param(loss::S2).unwrap());
        let total = loss::total_loss(&mut s, w, l2, s1, s2).unwrap();
        s.backward(total).unwrap();
        for p in store.params() {
            assert!(p.grad_norm() > 0.0, "{} has zero gradient", p.name);
        }
    }

    #[test]
    fn threshold_rules() {
        let p = Tensor::<f32>::full([2, 2], 0.9);
        assert!(predict_mask(&p, 0.5).unwrap().data().iter().all(|&b| b));
        let p = Tensor::<f64>::full([3], 0.25);
        assert!(predict_mask(&p, 0.25).unwrap().data().iter().all(|&b| b));
        assert!(predict_mask(&p, 1.0).is_err());
    }

    #[test]
    fn positives_fall_as_threshold_rises() {
        let mut r = Rng::new(2, Purpose::Fixture);
        let p = Tensor::<f64>::from_fn([500], |_| r.uniform());
        let mut last = usize::MAX;
        for k in 1..100 {
            let n = predict_mask(&p, k as f64 / 100.0).unwrap().road_pixels();
            assert!(n <= last);
            last = n;
        }
    }
}
