//! Window partitioning, cyclic shifts and the shifted-window mask.
//!
//! Feature maps here are channel-last `[N, H, W, C]`.

use crate::autograd::{Graph, Var, GATHER_ZERO};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Additive logit bias separating tokens from different pre-shift regions.
pub const MASK_VALUE: f64 = -100.0;

fn dims4<T: Scalar>(g: &Graph<T>, x: Var) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [n, h, w, c] => Ok([n, h, w, c]),
        ref s => shape_err(format!("expected [N, H, W, C], got {s:?}")),
    }
}

/// Gather index mapping `[N*(H/M)*(W/M), M*M, C]` windows to their source
/// positions in `[N, H, W, C]`.
pub fn partition_index(n: usize, h: usize, w: usize, c: usize, m: usize) -> Vec<usize> {
    let (nh, nw) = (h / m, w / m);
    let mut index = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for wi in 0..nh {
            for wj in 0..nw {
                for a in 0..m {
                    for bb in 0..m {
                        let base = ((b * h + wi * m + a) * w + wj * m + bb) * c;
                        index.extend(base..base + c);
                    }
                }
            }
        }
    }
    index
}

fn invert(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (dst, &src) in index.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Splits `[N, H, W, C]` into non-overlapping `M x M` windows flattened to
/// token sequences: `[N * H/M * W/M, M*M, C]`.
pub fn window_partition<T: Scalar>(g: &mut Graph<T>, x: Var, m: usize) -> Result<Var> {
    let [n, h, w, c] = dims4(g, x)?;
    if m == 0 || h % m != 0 || w % m != 0 {
        return shape_err(format!("{h}x{w} map is not divisible by window {m}"));
    }
    let index = partition_index(n, h, w, c, m);
    g.gather(x, index, [n * (h / m) * (w / m), m * m, c])
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(
    g: &mut Graph<T>,
    windows: Var,
    m: usize,
    n: usize,
    h: usize,
    w: usize,
) -> Result<Var> {
    let s = g.shape(windows).to_vec();
    if m == 0 || h % m != 0 || w % m != 0 || s.len() != 3 || s[0] != n * (h / m) * (w / m) || s[1] != m * m {
        return shape_err(format!("cannot reverse windows {s:?} into {n}x{h}x{w} with window {m}"));
    }
    let c = s[2];
    let index = invert(&partition_index(n, h, w, c, m));
    g.gather(windows, index, [n, h, w, c])
}

fn roll_index(n: usize, h: usize, w: usize, c: usize, s: usize, forward: bool) -> Vec<usize> {
    let mut index = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = if forward {
                    ((i + s) % h, (j + s) % w)
                } else {
                    ((i + h - s % h) % h, (j + w - s % w) % w)
                };
                let base = ((b * h + si) * w + sj) * c;
                index.extend(base..base + c);
            }
        }
    }
    index
}

/// Torus roll by `(-s, -s)`: position `(0, 0)` receives old `(s, s)`.
pub fn cyclic_shift<T: Scalar>(g: &mut Graph<T>, x: Var, s: usize) -> Result<Var> {
    let [n, h, w, c] = dims4(g, x)?;
    if s >= h.min(w) && s != 0 {
        return shape_err(format!("shift {s} must be below min({h}, {w})"));
    }
    g.gather(x, roll_index(n, h, w, c, s, true), [n, h, w, c])
}

/// Undoes [`cyclic_shift`].
pub fn inverse_shift<T: Scalar>(g: &mut Graph<T>, x: Var, s: usize) -> Result<Var> {
    let [n, h, w, c] = dims4(g, x)?;
    if s >= h.min(w) && s != 0 {
        return shape_err(format!("shift {s} must be below min({h}, {w})"));
    }
    g.gather(x, roll_index(n, h, w, c, s, false), [n, h, w, c])
}

/// Zero-pads bottom/right so both extents are multiples of `m`.
pub fn pad_to_multiple<T: Scalar>(g: &mut Graph<T>, x: Var, m: usize) -> Result<(Var, usize, usize)> {
    let [n, h, w, c] = dims4(g, x)?;
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (hp, wp) == (h, w) {
        return Ok((x, h, w));
    }
    let mut index = Vec::with_capacity(n * hp * wp * c);
    for b in 0..n {
        for i in 0..hp {
            for j in 0..wp {
                if i < h && j < w {
                    let base = ((b * h + i) * w + j) * c;
                    index.extend(base..base + c);
                } else {
                    index.extend(std::iter::repeat(GATHER_ZERO).take(c));
                }
            }
        }
    }
    Ok((g.gather(x, index, [n, hp, wp, c])?, hp, wp))
}

/// Keeps the top-left `h x w` region.
pub fn crop<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let [n, hp, wp, c] = dims4(g, x)?;
    if (hp, wp) == (h, w) {
        return Ok(x);
    }
    if h > hp || w > wp {
        return shape_err(format!("cannot crop {hp}x{wp} to {h}x{w}"));
    }
    let mut index = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let base = ((b * hp + i) * wp + j) * c;
                index.extend(base..base + c);
            }
        }
    }
    g.gather(x, index, [n, h, w, c])
}

/// Per-window additive attention bias `[num_windows, M*M, M*M]` with
/// entries in `{0, MASK_VALUE}`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask<T> {
    pub bias: Tensor<T>,
}

impl<T: Scalar> AttentionMask<T> {
    pub fn num_windows(&self) -> usize {
        self.bias.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.bias.shape()[1]
    }

    pub fn is_all_zero(&self) -> bool {
        self.bias.data().iter().all(|&v| v == T::zero())
    }

    /// Number of masked entries in window `w`.
    pub fn masked_in_window(&self, w: usize) -> usize {
        let l = self.tokens();
        self.bias.data()[w * l * l..(w + 1) * l * l]
            .iter()
            .filter(|&&v| v != T::zero())
            .count()
    }
}

/// Region label of each position of an `h x w` map after a shift of `s`,
/// from the 3x3 partition at cuts `{0, H-M, H-s} x {0, W-M, W-s}`.
pub fn region_labels(h: usize, w: usize, m: usize, s: usize) -> Vec<usize> {
    let band = |i: usize, extent: usize| {
        if i < extent - m {
            0
        } else if i < extent - s {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            labels.push(band(i, h) * 3 + band(j, w));
        }
    }
    labels
}

/// Mask for shifted-window attention over an `h x w` (padded) map.
pub fn build_shift_mask<T: Scalar>(h: usize, w: usize, m: usize, s: usize) -> Result<AttentionMask<T>> {
    if m == 0 || h % m != 0 || w % m != 0 || h < m || w < m {
        return shape_err(format!("{h}x{w} map is not divisible by window {m}"));
    }
    if s >= m {
        return shape_err(format!("shift {s} must be smaller than window {m}"));
    }
    let l = m * m;
    let nw = (h / m) * (w / m);
    if s == 0 {
        return Ok(AttentionMask {
            bias: Tensor::zeros([nw, l, l]),
        });
    }
    let labels = region_labels(h, w, m, s);
    let order = partition_index(1, h, w, 1, m);
    let mut bias = vec![T::zero(); nw * l * l];
    for win in 0..nw {
        let tokens = &order[win * l..(win + 1) * l];
        for (p, &tp) in tokens.iter().enumerate() {
            for (q, &tq) in tokens.iter().enumerate() {
                if labels[tp] != labels[tq] {
                    bias[(win * l + p) * l + q] = T::lit(MASK_VALUE);
                }
            }
        }
    }
    Ok(AttentionMask {
        bias: Tensor::new([nw, l, l], bias)?,
    })
}
