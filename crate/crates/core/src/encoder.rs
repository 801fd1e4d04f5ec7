//! Dual-branch encoder stage: a residual CNN branch `f` and a Swin branch
//! `g`, fused as `f(x) + tanh(g(x))`, plus the stem-and-three-stages encoder.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvBn, ResNetBlock};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::swin::{SwinBlock, WindowAttentionConfig};
use crate::tensor::Scalar;

/// How the Swin branch is merged into the CNN branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Tanh,
    Batchnorm,
    None,
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Fusion::Tanh),
            "batchnorm" => Ok(Fusion::Batchnorm),
            "none" => Ok(Fusion::None),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoSwinStageConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub num_res_blocks: usize,
    /// Window settings of the Swin branch; `embed_dim` must equal
    /// `out_channels`.
    pub window: WindowAttentionConfig,
    pub downsample: bool,
    pub fusion: Fusion,
}

impl CoSwinStageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_res_blocks == 0 {
            return Err(Error::Config("a stage needs at least one residual block".into()));
        }
        if self.window.embed_dim != self.out_channels {
            return Err(Error::Config(format!(
                "swin branch width {} differs from residual branch width {}",
                self.window.embed_dim, self.out_channels
            )));
        }
        self.window.validate()
    }
}

/// One encoder stage. With `swin == None` the stage is the residual branch
/// alone (the no-CoSwin ablation).
#[derive(Clone, Debug)]
pub struct CoSwinStage {
    pub cfg: CoSwinStageConfig,
    pub res_blocks: Vec<ResNetBlock>,
    pub swin: Option<SwinBranch>,
}

#[derive(Clone, Debug)]
pub struct SwinBranch {
    /// Stride-2 2x2 conv when downsampling, 1x1 conv otherwise.
    pub reduce: Conv2d,
    pub blocks: Vec<SwinBlock>,
    pub fusion_bn: Option<BatchNorm2d>,
}

/// Intermediate values of a stage forward, for inspection.
pub struct StageOutput {
    pub f: Var,
    pub g: Option<Var>,
    pub y: Var,
}

impl CoSwinStage {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        cfg: CoSwinStageConfig,
        with_swin: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let stride = if cfg.downsample { 2 } else { 1 };
        let mut res_blocks = Vec::with_capacity(cfg.num_res_blocks);
        for i in 0..cfg.num_res_blocks {
            let (cin, st) = if i == 0 { (cfg.in_channels, stride) } else { (cfg.out_channels, 1) };
            res_blocks.push(ResNetBlock::new(store, rng, &format!("{prefix}.res.{i}"), cin, cfg.out_channels, st)?);
        }
        let swin = if with_swin {
            let k = stride;
            let reduce = Conv2d::new(
                store,
                rng,
                &format!("{prefix}.swin.reduce"),
                cfg.in_channels,
                cfg.out_channels,
                k,
                stride,
                0,
                true,
            )?;
            let w = cfg.window;
            let blocks = vec![SwinBlock::new(
                store,
                rng,
                &format!("{prefix}.swin.block.0"),
                w.embed_dim,
                w.window_size,
                w.num_heads,
            )?];
            let fusion_bn = match cfg.fusion {
                Fusion::Batchnorm => Some(BatchNorm2d::new(store, &format!("{prefix}.swin.fusion_bn"), cfg.out_channels)?),
                _ => None,
            };
            Some(SwinBranch {
                reduce,
                blocks,
                fusion_bn,
            })
        } else {
            None
        };
        Ok(Self { cfg, res_blocks, swin })
    }

    pub fn residual_branch<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let mut y = x;
        for b in &self.res_blocks {
            y = b.forward(s, y)?;
        }
        Ok(y)
    }

    /// Raw Swin-branch output `g(x)` before the fusion nonlinearity.
    pub fn swin_branch<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Option<Var>> {
        let Some(branch) = &self.swin else {
            return Ok(None);
        };
        let mut y = branch.reduce.forward(s, x)?;
        for b in &branch.blocks {
            y = b.forward(s, y)?;
        }
        Ok(Some(y))
    }

    pub fn forward_parts<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<StageOutput> {
        match s.graph.shape(x).get(1) {
            Some(&c) if c == self.cfg.in_channels && s.graph.shape(x).len() == 4 => {}
            _ => {
                return shape_err(format!(
                    "stage expects [N, {}, H, W], got {:?}",
                    self.cfg.in_channels,
                    s.graph.shape(x)
                ))
            }
        }
        let f = self.residual_branch(s, x)?;
        let Some(g) = self.swin_branch(s, x)? else {
            return Ok(StageOutput { f, g: None, y: f });
        };
        if s.graph.shape(f) != s.graph.shape(g) {
            return shape_err(format!(
                "branch shapes disagree: {:?} vs {:?}",
                s.graph.shape(f),
                s.graph.shape(g)
            ));
        }
        let aligned = match self.cfg.fusion {
            Fusion::Tanh => s.graph.tanh(g)?,
            Fusion::Batchnorm => {
                let bn = self.swin.as_ref().and_then(|b| b.fusion_bn.as_ref()).expect("built with fusion bn");
                bn.forward(s, g)?
            }
            Fusion::None => g,
        };
        let y = s.graph.add(f, aligned)?;
        Ok(StageOutput { f, g: Some(g), y })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        Ok(self.forward_parts(s, x)?.y)
    }
}

/// Total spatial reduction of the encoder: stride-2 stem then three
/// stride-2 stages.
pub const ENCODER_STRIDE: usize = 16;

/// Stem plus three downsampling stages.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: ConvBn,
    pub stages: Vec<CoSwinStage>,
}

pub struct Encoded {
    pub bottleneck: Var,
    /// Input of each stage, shallowest first.
    pub skips: Vec<Var>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        widths: [usize; 3],
        window_size: usize,
        num_heads: usize,
        res_blocks: usize,
        fusion: Fusion,
        with_swin: bool,
    ) -> Result<Self> {
        let stem = ConvBn::new(store, rng, "encoder.stem", 3, widths[0], 7, 2, true)?;
        let ins = [widths[0], widths[0], widths[1]];
        let mut stages = Vec::with_capacity(3);
        for i in 0..3 {
            let cfg = CoSwinStageConfig {
                in_channels: ins[i],
                out_channels: widths[i],
                num_res_blocks: res_blocks,
                window: WindowAttentionConfig {
                    window_size,
                    num_heads,
                    embed_dim: widths[i],
                    shift: 0,
                    qkv_bias: true,
                },
                downsample: true,
                fusion,
            };
            stages.push(CoSwinStage::new(store, rng, &format!("encoder.stage{}", i + 1), cfg, with_swin)?);
        }
        Ok(Self { stem, stages })
    }

    pub fn encode<T: Scalar>(&self, s: &mut Session<T>, image: Var) -> Result<Encoded> {
        let shape = s.graph.shape(image).to_vec();
        match shape[..] {
            [_, 3, h, w] if h > 0 && w > 0 && h % ENCODER_STRIDE == 0 && w % ENCODER_STRIDE == 0 => {}
            [_, 3, h, w] => {
                return shape_err(format!(
                    "input {h}x{w} must have both sides divisible by {ENCODER_STRIDE} (minimum {ENCODER_STRIDE}x{ENCODER_STRIDE})"
                ))
            }
            _ => return shape_err(format!("encoder expects [N, 3, H, W], got {shape:?}")),
        }
        let mut x = self.stem.forward(s, image)?;
        let mut skips = Vec::with_capacity(3);
        for stage in &self.stages {
            skips.push(x);
            x = stage.forward(s, x)?;
        }
        Ok(Encoded { bottleneck: x, skips })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use crate::tensor::Tensor;

    fn stage_cfg(fusion: Fusion) -> CoSwinStageConfig {
        CoSwinStageConfig {
            in_channels: 4,
            out_channels: 8,
            num_res_blocks: 1,
            window: WindowAttentionConfig {
                window_size: 2,
                num_heads: 2,
                embed_dim: 8,
                shift: 0,
                qkv_bias: true,
            },
            downsample: true,
            fusion,
        }
    }

    #[test]
    fn width_mismatch_fails_at_construction() {
        let mut cfg = stage_cfg(Fusion::Tanh);
        cfg.window.embed_dim = 4;
        let mut store = ParamStore::<f32>::new();
        let err = CoSwinStage::new(&mut store, &mut Rng::new(0, Purpose::Init), "s", cfg, true);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn all_fusions_halve_and_agree_on_shape() {
        for fusion in [Fusion::Tanh, Fusion::Batchnorm, Fusion::None] {
            let mut store = ParamStore::<f64>::new();
            let stage = CoSwinStage::new(&mut store, &mut Rng::new(0, Purpose::Init), "s", stage_cfg(fusion), true).unwrap();
            let mut s = Session::new(&mut store, true);
            let x = s.input(Tensor::from_fn([2, 4, 8, 6], |i| (i as f64 * 0.37).sin()));
            let y = stage.forward(&mut s, x).unwrap();
            assert_eq!(s.graph.shape(y), &[2, 8, 4, 3]);
        }
    }

    #[test]
    fn tanh_fusion_stays_within_one_of_residual_branch() {
        let mut store = ParamStore::<f64>::new();
        let stage = CoSwinStage::new(&mut store, &mut Rng::new(3, Purpose::Init), "s", stage_cfg(Fusion::Tanh), true).unwrap();
        let mut s = Session::new(&mut store, true);
        let x = s.input(Tensor::from_fn([1, 4, 8, 8], |i| ((i * 7919) % 23) as f64 - 11.0));
        let out = stage.forward_parts(&mut s, x).unwrap();
        let g = s.value(out.g.unwrap()).data();
        let (f, y) = (s.value(out.f).data(), s.value(out.y).data());
        for ((a, b), gv) in f.iter().zip(y).zip(g) {
            assert_eq!((a + gv.tanh()).to_bits(), b.to_bits());
            // one rounding of the sum may overshoot by half an ulp of y
            assert!((a - b).abs() <= 1.0 + f64::EPSILON * b.abs());
        }
    }

    #[test]
    fn encoder_rejects_indivisible_size_with_hint() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(&mut store, &mut Rng::new(0, Purpose::Init), [4, 8, 8], 2, 1, 1, Fusion::Tanh, true).unwrap();
        let mut s = Session::new(&mut store, false);
        let x = s.input(Tensor::zeros([1, 3, 24, 24]));
        let msg = enc.encode(&mut s, x).err().unwrap().to_string();
        assert!(msg.contains("divisible by 16"), "{msg}");
    }

    #[test]
    fn encoder_shapes() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(&mut store, &mut Rng::new(0, Purpose::Init), [4, 8, 16], 4, 2, 1, Fusion::Tanh, true).unwrap();
        let mut s = Session::new(&mut store, true);
        let x = s.input(Tensor::from_fn([2, 3, 64, 64], |i| (i as f32 * 0.01).cos()));
        let e = enc.encode(&mut s, x).unwrap();
        let shapes: Vec<_> = e.skips.iter().map(|&v| s.graph.shape(v).to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 4, 32, 32], vec![2, 4, 16, 16], vec![2, 8, 8, 8]]);
        assert_eq!(s.graph.shape(e.bottleneck), &[2, 16, 4, 4]);
    }
}
