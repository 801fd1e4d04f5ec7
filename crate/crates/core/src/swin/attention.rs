use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{normal_init, Linear};
use crate::params::{ParamKind, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

use super::window::AttentionMask;

/// Configuration of one (shifted-)window attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowAttentionConfig {
    pub window_size: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    /// 0 for W-MSA, `window_size / 2` for SW-MSA.
    pub shift: usize,
    pub qkv_bias: bool,
}

impl WindowAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.num_heads == 0 {
            return Err(Error::Config("window size and head count must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.shift != 0 && self.shift != self.window_size / 2 {
            return Err(Error::Config(format!(
                "shift must be 0 or {}, got {}",
                self.window_size / 2,
                self.shift
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn tokens(&self) -> usize {
        self.window_size * self.window_size
    }
}

/// Index of each token pair into the `(2M-1)^2` relative-offset table.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let span = 2 * m - 1;
    let mut index = Vec::with_capacity(m.pow(4));
    for pi in 0..m {
        for pj in 0..m {
            for qi in 0..m {
                for qj in 0..m {
                    index.push((pi + m - 1 - qi) * span + (pj + m - 1 - qj));
                }
            }
        }
    }
    index
}

/// Multi-head self-attention inside each window with a learned relative
/// position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub cfg: WindowAttentionConfig,
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_bias: String,
}

/// Forward result including the post-softmax attention weights
/// `[windows, heads, M*M, M*M]`.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

impl WindowAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        cfg: WindowAttentionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let qkv = Linear::new(store, rng, &format!("{prefix}.qkv"), c, 3 * c, cfg.qkv_bias)?;
        let proj = Linear::new(store, rng, &format!("{prefix}.proj"), c, c, true)?;
        let rel_bias = format!("{prefix}.rel_bias");
        let span = 2 * cfg.window_size - 1;
        store.register(
            &rel_bias,
            normal_init(&[span * span, cfg.num_heads], 0.02, rng),
            ParamKind::PositionBias,
        )?;
        Ok(Self {
            cfg,
            qkv,
            proj,
            rel_bias,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<T>,
        tokens: Var,
        mask: Option<&AttentionMask<T>>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(s, tokens, mask)?.out)
    }

    pub fn forward_with_weights<T: Scalar>(
        &self,
        s: &mut Session<T>,
        tokens: Var,
        mask: Option<&AttentionMask<T>>,
    ) -> Result<AttentionOutput> {
        let cfg = self.cfg;
        let (heads, d, l, c) = (cfg.num_heads, cfg.head_dim(), cfg.tokens(), cfg.embed_dim);
        let shape = s.graph.shape(tokens).to_vec();
        if shape.len() != 3 || shape[1] != l || shape[2] != c {
            return shape_err(format!("window attention expects [B, {l}, {c}], got {shape:?}"));
        }
        let bw = shape[0];
        let qkv = self.qkv.forward(s, tokens)?;

        // split into q, k, v: [bw * heads, l, d]
        let mut parts = Vec::with_capacity(3);
        for part in 0..3 {
            let mut index = Vec::with_capacity(bw * l * c);
            for b in 0..bw {
                for h in 0..heads {
                    for t in 0..l {
                        let base = (b * l + t) * 3 * c + part * c + h * d;
                        index.extend(base..base + d);
                    }
                }
            }
            parts.push(s.graph.gather(qkv, index, [bw * heads, l, d])?);
        }
        let q = s.graph.scale(parts[0], 1.0 / (d as f64).sqrt())?;
        let logits = s.graph.bmm(q, parts[1], true)?;

        let table = s.param(&self.rel_bias)?;
        let mut bias_index = Vec::with_capacity(heads * l * l);
        let rel = relative_position_index(cfg.window_size);
        for h in 0..heads {
            bias_index.extend(rel.iter().map(|&r| r * heads + h));
        }
        let bias = s.graph.gather(table, bias_index, [1, heads, l, l])?;
        let logits = s.graph.reshape(logits, [bw, heads, l, l])?;
        let mut logits = s.graph.add(logits, bias)?;

        if let Some(mask) = mask {
            let nw = mask.num_windows();
            if mask.tokens() != l || bw % nw != 0 {
                return shape_err(format!(
                    "mask for {nw} windows of {} tokens does not fit {bw} windows of {l}",
                    mask.tokens()
                ));
            }
            let m = s.graph.constant(mask.bias.clone().reshape([1, nw, 1, l, l])?);
            let grouped = s.graph.reshape(logits, [bw / nw, nw, heads, l, l])?;
            let masked = s.graph.add(grouped, m)?;
            logits = s.graph.reshape(masked, [bw, heads, l, l])?;
        }

        let weights = s.graph.softmax(logits)?;
        let flat = s.graph.reshape(weights, [bw * heads, l, l])?;
        let mixed = s.graph.bmm(flat, parts[2], false)?;

        // merge heads back: [bw, l, c]
        let mut index = Vec::with_capacity(bw * l * c);
        for b in 0..bw {
            for t in 0..l {
                for h in 0..heads {
                    let base = ((b * heads + h) * l + t) * d;
                    index.extend(base..base + d);
                }
            }
        }
        let merged = s.graph.gather(mixed, index, [bw, l, c])?;
        let out = self.proj.forward(s, merged)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Builds a zero tensor shaped like the relative bias table, for tests that
/// disable the bias.
pub fn zero_table<T: Scalar>(cfg: &WindowAttentionConfig) -> Tensor<T> {
    let span = 2 * cfg.window_size - 1;
    Tensor::zeros([span * span, cfg.num_heads])
}
