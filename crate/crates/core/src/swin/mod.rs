//! Shifted-window self-attention: the transformer branch of a CoSwin stage.

mod attention;
mod window;

pub use attention::{
    relative_position_index, zero_table, AttentionOutput, WindowAttention, WindowAttentionConfig,
};
pub use window::{
    build_shift_mask, crop, cyclic_shift, inverse_shift, pad_to_multiple, partition_index,
    region_labels, window_partition, window_reverse, AttentionMask, MASK_VALUE,
};

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Scalar;

/// Hidden width of the MLP relative to the embedding width.
pub const MLP_RATIO: usize = 4;

/// LN -> (S)W-MSA -> residual -> LN -> MLP -> residual, on `[N, H, W, C]`.
#[derive(Clone, Debug)]
pub struct SwinSubBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SwinSubBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        cfg: WindowAttentionConfig,
    ) -> Result<Self> {
        let c = cfg.embed_dim;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), c)?,
            attn: WindowAttention::new(store, rng, &format!("{prefix}.attn"), cfg)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), c)?,
            fc1: Linear::new(store, rng, &format!("{prefix}.mlp.fc1"), c, MLP_RATIO * c, true)?,
            fc2: Linear::new(store, rng, &format!("{prefix}.mlp.fc2"), MLP_RATIO * c, c, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let cfg = self.attn.cfg;
        let &[n, h, w, c] = s.graph.shape(x) else {
            return shape_err(format!("swin sub-block expects [N, H, W, C], got {:?}", s.graph.shape(x)));
        };
        if c != cfg.embed_dim {
            return shape_err(format!("swin sub-block width {} vs input {c}", cfg.embed_dim));
        }
        let m = cfg.window_size;

        let y = self.norm1.forward(s, x)?;
        let (y, hp, wp) = pad_to_multiple(&mut s.graph, y, m)?;
        let shift = cfg.shift;
        let y = if shift > 0 {
            cyclic_shift(&mut s.graph, y, shift)?
        } else {
            y
        };
        let windows = window_partition(&mut s.graph, y, m)?;
        let mask = if shift > 0 {
            Some(build_shift_mask::<T>(hp, wp, m, shift)?)
        } else {
            None
        };
        let attended = self.attn.forward(s, windows, mask.as_ref())?;
        let y = window_reverse(&mut s.graph, attended, m, n, hp, wp)?;
        let y = if shift > 0 {
            inverse_shift(&mut s.graph, y, shift)?
        } else {
            y
        };
        let y = crop(&mut s.graph, y, h, w)?;
        let x = s.graph.add(x, y)?;

        let y = self.norm2.forward(s, x)?;
        let y = self.fc1.forward(s, y)?;
        let y = s.graph.gelu(y)?;
        let y = self.fc2.forward(s, y)?;
        s.graph.add(x, y)
    }
}

/// A W-MSA sub-block followed by an SW-MSA sub-block, on channel-first
/// feature maps `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub regular: SwinSubBlock,
    pub shifted: SwinSubBlock,
}

impl SwinBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        embed_dim: usize,
        window_size: usize,
        num_heads: usize,
    ) -> Result<Self> {
        let base = WindowAttentionConfig {
            window_size,
            num_heads,
            embed_dim,
            shift: 0,
            qkv_bias: true,
        };
        let shifted = WindowAttentionConfig {
            shift: window_size / 2,
            ..base
        };
        Ok(Self {
            regular: SwinSubBlock::new(store, rng, &format!("{prefix}.wmsa"), base)?,
            shifted: SwinSubBlock::new(store, rng, &format!("{prefix}.swmsa"), shifted)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        if s.graph.shape(x).len() != 4 {
            return shape_err(format!("swin block expects [N, C, H, W], got {:?}", s.graph.shape(x)));
        }
        let tokens = s.graph.permute(x, &[0, 2, 3, 1])?;
        let tokens = self.regular.forward(s, tokens)?;
        let tokens = self.shifted.forward(s, tokens)?;
        s.graph.permute(tokens, &[0, 3, 1, 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use crate::tensor::Tensor;

    fn rng(seed: u64) -> Rng {
        Rng::new(seed, Purpose::Fixture)
    }

    fn random(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| r.range(-1.0, 1.0))
    }

    fn attention(store: &mut ParamStore<f64>, m: usize, heads: usize, c: usize, shift: usize) -> WindowAttention {
        let cfg = WindowAttentionConfig {
            window_size: m,
            num_heads: heads,
            embed_dim: c,
            shift,
            qkv_bias: true,
        };
        let mut r = rng(7);
        let a = WindowAttention::new(store, &mut r, "a", cfg).unwrap();
        // make the projections non-trivial
        for p in store.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = r.range(-0.5, 0.5));
        }
        a
    }

    #[test]
    fn relative_index_is_symmetric_about_centre() {
        let m = 3;
        let idx = relative_position_index(m);
        let centre = (m - 1) * (2 * m - 1) + (m - 1);
        for t in 0..m * m {
            assert_eq!(idx[t * m * m + t], centre);
        }
        assert_eq!(*idx.iter().max().unwrap(), (2 * m - 1) * (2 * m - 1) - 1);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let a = attention(&mut store, 2, 2, 4, 1);
        let mask = build_shift_mask::<f64>(4, 4, 2, 1).unwrap();
        let x = random(&[8, 4, 4], &mut rng(1));
        let mut s = Session::new(&mut store, false);
        let x = s.input(x);
        let out = a.forward_with_weights(&mut s, x, Some(&mask)).unwrap();
        for row in s.value(out.weights).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_matches_wrap_flag_oracle() {
        for m in [2, 4] {
            let s = m / 2;
            for h in (m..=8).step_by(m) {
                for w in (m..=8).step_by(m) {
                    let mask = build_shift_mask::<f64>(h, w, m, s).unwrap();
                    let (l, nwc) = (m * m, w / m);
                    for win in 0..mask.num_windows() {
                        let pos = |t: usize| ((win / nwc) * m + t / m, (win % nwc) * m + t % m);
                        for p in 0..l {
                            for q in 0..l {
                                let ((pi, pj), (qi, qj)) = (pos(p), pos(q));
                                let same = (pi + s >= h) == (qi + s >= h) && (pj + s >= w) == (qj + s >= w);
                                let v = mask.bias.data()[(win * l + p) * l + q];
                                assert_eq!(v, if same { 0.0 } else { MASK_VALUE }, "{h}x{w} m{m} win{win}");
                            }
                        }
                    }
                }
            }
        }
    }

    /// Per-token loop over the shifted map: each token attends to the tokens
    /// of its window that come from the same pre-shift region.
    #[test]
    fn masked_attention_equals_region_restricted_loop() {
        let (m, heads, c, hw) = (2, 2, 4, 4);
        let mut store = ParamStore::new();
        let a = attention(&mut store, m, heads, c, 1);
        let span = 2 * m - 1;
        store.get_mut("a.rel_bias").unwrap().tensor = Tensor::zeros([span * span, heads]);
        let mask = build_shift_mask::<f64>(hw, hw, m, 1).unwrap();
        let nw = mask.num_windows();
        let x = random(&[nw, m * m, c], &mut rng(3));

        let wqkv = store.get("a.qkv.weight").unwrap().tensor.clone();
        let bqkv = store.get("a.qkv.bias").unwrap().tensor.clone();
        let wp = store.get("a.proj.weight").unwrap().tensor.clone();
        let bp = store.get("a.proj.bias").unwrap().tensor.clone();
        let lin = |v: &[f64], w: &Tensor<f64>, b: &Tensor<f64>, out: usize| -> Vec<f64> {
            (0..out)
                .map(|o| b.data()[o] + v.iter().enumerate().map(|(i, vi)| vi * w.data()[i * out + o]).sum::<f64>())
                .collect()
        };

        let l = m * m;
        let d = c / heads;
        let mut expect = vec![0.0; nw * l * c];
        for win in 0..nw {
            let tok: Vec<Vec<f64>> = (0..l)
                .map(|t| lin(&x.data()[(win * l + t) * c..(win * l + t + 1) * c], &wqkv, &bqkv, 3 * c))
                .collect();
            for p in 0..l {
                let mut mixed = vec![0.0; c];
                for h in 0..heads {
                    let allowed: Vec<usize> = (0..l)
                        .filter(|&q| mask.bias.data()[(win * l + p) * l + q] == 0.0)
                        .collect();
                    let logits: Vec<f64> = allowed
                        .iter()
                        .map(|&q| (0..d).map(|i| tok[p][h * d + i] * tok[q][c + h * d + i]).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
                    for (k, &q) in allowed.iter().enumerate() {
                        let wgt = (logits[k] - mx).exp() / z;
                        for i in 0..d {
                            mixed[h * d + i] += wgt * tok[q][2 * c + h * d + i];
                        }
                    }
                }
                let y = lin(&mixed, &wp, &bp, c);
                expect[(win * l + p) * c..(win * l + p + 1) * c].copy_from_slice(&y);
            }
        }

        let mut s = Session::new(&mut store, false);
        let xv = s.input(x);
        let y = a.forward(&mut s, xv, Some(&mask)).unwrap();
        for (g, e) in s.value(y).data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn unbiased_attention_is_permutation_equivariant() {
        let (m, c) = (2, 4);
        let mut store = ParamStore::new();
        let a = attention(&mut store, m, 2, c, 0);
        store.get_mut("a.rel_bias").unwrap().tensor = zero_table(&a.cfg);
        let x = random(&[1, m * m, c], &mut rng(5));
        let perm = [2, 0, 3, 1];
        let mut px = Tensor::zeros([1, m * m, c]);
        for (dst, &src) in perm.iter().enumerate() {
            px.data_mut()[dst * c..(dst + 1) * c].copy_from_slice(&x.data()[src * c..(src + 1) * c]);
        }
        let mut s = Session::new(&mut store, false);
        let (xv, pv) = (s.input(x), s.input(px));
        let y = a.forward(&mut s, xv, None).unwrap();
        let py = a.forward(&mut s, pv, None).unwrap();
        let (y, py) = (s.value(y).data(), s.value(py).data());
        for (dst, &src) in perm.iter().enumerate() {
            for i in 0..c {
                assert!((py[dst * c + i] - y[src * c + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_output_projections_make_block_identity() {
        let mut store = ParamStore::<f32>::new();
        let block = SwinBlock::new(&mut store, &mut rng(2), "sw", 8, 2, 2).unwrap();
        for p in store.params_mut() {
            if p.name.ends_with("proj.weight") || p.name.ends_with("proj.bias") || p.name.contains("fc2") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x: Tensor<f32> = random(&[2, 8, 5, 6], &mut rng(4)).cast();
        let mut s = Session::new(&mut store, false);
        let xv = s.input(x.clone());
        let y = block.forward(&mut s, xv).unwrap();
        assert_eq!(s.value(y).data(), x.data());
    }

    #[test]
    fn block_keeps_shape_on_unaligned_map() {
        let mut store = ParamStore::<f64>::new();
        let block = SwinBlock::new(&mut store, &mut rng(2), "sw", 4, 4, 1).unwrap();
        let mut s = Session::new(&mut store, true);
        let x = s.input(random(&[1, 4, 3, 7], &mut rng(9)));
        let y = block.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[1, 4, 3, 7]);
    }
}
