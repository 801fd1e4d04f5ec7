//! Central-difference verification of every backward rule.
//!
//! Each check reduces the layer output `y` to `L = sum(r * y)` with a fixed
//! random `r`, so no output direction is privileged, then compares the tape
//! gradient of every checked coordinate against `(L(x + h) - L(x - h)) / 2h`.
//! The error of a tensor is `max|a - n| / max(max|a|, max|n|)`.

use std::time::{Duration, Instant};

use crate::autograd::{Fault, Var};
use crate::cfilter::CFilter;
use crate::encoder::{CoSwinStage, CoSwinStageConfig, Fusion};
use crate::error::Result;
use crate::loss;
use crate::nn::{BatchNorm2d, Conv2d, LayerNorm, Linear, ResNetBlock, UpsampleBlock};
use crate::params::{ParamKind, ParamStore, Session};
use crate::rng::{Purpose, Rng};
use crate::roadnet::{NetworkConfig, RoadNet};
use crate::swin::{build_shift_mask, SwinBlock, WindowAttention, WindowAttentionConfig};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
/// Coordinates checked per tensor; larger tensors are subsampled.
pub const COORDS_PER_TENSOR: usize = 40;
/// Coordinates checked by the end-to-end network check.
pub const NETWORK_COORDS: usize = 50;

#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Tensor holding the worst error.
    pub worst: String,
    /// Coordinates compared.
    pub coords: usize,
    /// Coordinates excluded because a perturbation switched a ReLU or max
    /// onto a different branch, where the difference quotient is not a
    /// derivative estimate.
    pub nonsmooth: usize,
    /// Set when some tensor (or the global sample) got no smooth
    /// coordinate to compare, which fails the check.
    pub starved: Option<String>,
    pub elapsed: Duration,
}

/// Global sampling gives up after this many draws per wanted coordinate.
pub const MAX_DRAWS_PER_COORD: usize = 10;

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.starved.is_none()
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Which coordinates to perturb.
enum Sampling {
    PerTensor(usize),
    /// A fixed number of coordinates drawn across all tensors, judged as
    /// one vector.
    Global(usize),
}

struct Probe<'a> {
    name: &'a str,
    tolerance: f64,
    train: bool,
    sampling: Sampling,
}

fn run_probe(
    probe: Probe,
    store: &mut ParamStore<f64>,
    seed: u64,
    fault: Option<Fault>,
    forward: &dyn Fn(&mut Session<f64>) -> Result<Var>,
) -> Result<LayerCheck> {
    let start = Instant::now();
    let mut rng = Rng::new(seed ^ 0x9e37_79b9, Purpose::Fixture);

    // analytic pass
    store.zero_grad();
    let (r, base) = {
        let mut s = match fault {
            Some(f) => Session::with_fault(store, probe.train, f),
            None => Session::new(store, probe.train),
        };
        let y = forward(&mut s)?;
        let base = s.graph.branch_signature();
        let shape = s.graph.shape(y).to_vec();
        let r = Tensor::<f64>::from_fn(shape, |_| rng.range(-1.0, 1.0));
        let rv = s.graph.constant(r.clone());
        let weighted = s.graph.mul(y, rv)?;
        let l = s.graph.sum_all(weighted)?;
        s.backward(l)?;
        (r, base)
    };
    let objective = |store: &mut ParamStore<f64>| -> Result<(f64, bool)> {
        let mut s = Session::new(store, probe.train);
        let y = forward(&mut s)?;
        let smooth = s.graph.branch_signature() == base;
        Ok((s.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum(), smooth))
    };

    let names = store.names();
    let eval_coord = |store: &mut ParamStore<f64>, name: &str, i: usize| -> Result<Option<(f64, f64)>> {
        let orig = store.get(name)?.tensor.data()[i];
        store.get_mut(name)?.tensor.data_mut()[i] = orig + STEP;
        let (plus, smooth_plus) = objective(store)?;
        store.get_mut(name)?.tensor.data_mut()[i] = orig - STEP;
        let (minus, smooth_minus) = objective(store)?;
        store.get_mut(name)?.tensor.data_mut()[i] = orig;
        Ok((smooth_plus && smooth_minus).then(|| (store.get(name).expect("exists").grad[i], (plus - minus) / (2.0 * STEP))))
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut coords: Vec<(String, usize)> = Vec::new();
    let mut nonsmooth = 0;
    let mut starved = None;
    match probe.sampling {
        Sampling::PerTensor(cap) => {
            for n in &names {
                let numel = store.get(n)?.tensor.numel();
                let mut idx: Vec<usize> = (0..numel).collect();
                if numel > cap {
                    rng.shuffle(&mut idx);
                    idx.truncate(cap);
                    idx.sort_unstable();
                }
                let before = coords.len();
                for i in idx {
                    match eval_coord(store, n, i)? {
                        Some((a, num)) => {
                            analytic.push(a);
                            numeric.push(num);
                            coords.push((n.clone(), i));
                        }
                        None => nonsmooth += 1,
                    }
                }
                if coords.len() == before {
                    starved = Some(n.clone());
                }
            }
        }
        Sampling::Global(k) => {
            let mut draws = 0;
            while coords.len() < k && draws < MAX_DRAWS_PER_COORD * k {
                draws += 1;
                let n = &names[rng.below(names.len())];
                let i = rng.below(store.get(n)?.tensor.numel());
                match eval_coord(store, n, i)? {
                    Some((a, num)) => {
                        analytic.push(a);
                        numeric.push(num);
                        coords.push((n.clone(), i));
                    }
                    None => nonsmooth += 1,
                }
            }
            if coords.len() < k {
                starved = Some(format!("only {} smooth coordinates", coords.len()));
            }
        }
    }

    let (max_rel_err, worst) = match probe.sampling {
        Sampling::Global(_) => (rel_err(&analytic, &numeric), "sampled parameters".to_string()),
        Sampling::PerTensor(_) => {
            let mut worst = (0.0, String::new());
            let mut start = 0;
            while start < coords.len() {
                let name = &coords[start].0;
                let end = start + coords[start..].iter().take_while(|(n, _)| n == name).count();
                let e = rel_err(&analytic[start..end], &numeric[start..end]);
                if e >= worst.0 {
                    worst = (e, name.clone());
                }
                start = end;
            }
            worst
        }
    };
    Ok(LayerCheck {
        name: probe.name.to_string(),
        max_rel_err,
        tolerance: probe.tolerance,
        worst,
        coords: coords.len(),
        nonsmooth,
        starved,
        elapsed: start.elapsed(),
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.range(lo, hi))
}

/// Values in `[lo, hi]` with random sign, keeping clear of zero.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.range(lo, hi);
        if rng.uniform() < 0.5 {
            -v
        } else {
            v
        }
    })
}

fn with_inputs(inputs: Vec<Tensor<f64>>) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    for (i, t) in inputs.into_iter().enumerate() {
        store.register(format!("input.{i}"), t, ParamKind::Bias).expect("fresh store");
    }
    store
}

fn input(s: &mut Session<f64>, i: usize) -> Result<Var> {
    s.param(&format!("input.{i}"))
}

/// Runs every check and returns one result per layer kind.
pub fn run_suite(seed: u64, fault: Option<Fault>) -> Result<Vec<LayerCheck>> {
    let mut out = Vec::new();
    let mut data = Rng::new(seed, Purpose::Fixture);
    let init = &mut Rng::new(seed, Purpose::Init);
    let prim = |name| Probe {
        name,
        tolerance: PRIMITIVE_TOLERANCE,
        train: true,
        sampling: Sampling::PerTensor(COORDS_PER_TENSOR),
    };
    let layer = |name| Probe {
        name,
        tolerance: LAYER_TOLERANCE,
        train: true,
        sampling: Sampling::PerTensor(COORDS_PER_TENSOR),
    };

    // elementwise
    let binaries: [(&str, fn(&mut crate::Graph<f64>, Var, Var) -> Result<Var>); 3] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
    ];
    for (name, op) in binaries {
        let mut st = with_inputs(vec![uniform(&[2, 3, 4], -1.0, 1.0, &mut data), uniform(&[3, 1], -1.0, 1.0, &mut data)]);
        out.push(run_probe(prim(name), &mut st, seed, fault, &|s| {
            let (a, b) = (input(s, 0)?, input(s, 1)?);
            op(&mut s.graph, a, b)
        })?);
    }
    type Unary = fn(&mut crate::Graph<f64>, Var) -> Result<Var>;
    let unaries: [(&str, Unary, f64, f64); 7] = [
        ("tanh", |g, x| g.tanh(x), -2.0, 2.0),
        ("sigmoid", |g, x| g.sigmoid(x), -3.0, 3.0),
        ("gelu", |g, x| g.gelu(x), -3.0, 3.0),
        ("exp", |g, x| g.exp(x), -1.0, 1.0),
        ("log", |g, x| g.log(x), 1.0, 2.0),
        ("relu", |g, x| g.relu(x), 0.1, 1.0),
        ("scale", |g, x| g.scale(x, -1.7), -1.0, 1.0),
    ];
    for (name, op, lo, hi) in unaries {
        let x = if name == "relu" {
            away_from_zero(&[3, 5], lo, hi, &mut data)
        } else {
            uniform(&[3, 5], lo, hi, &mut data)
        };
        let mut st = with_inputs(vec![x]);
        out.push(run_probe(prim(name), &mut st, seed, fault, &|s| {
            let x = input(s, 0)?;
            op(&mut s.graph, x)
        })?);
    }

    // linear algebra, reductions and layout
    let mut st = with_inputs(vec![uniform(&[3, 4], -1.0, 1.0, &mut data), uniform(&[4, 5], -1.0, 1.0, &mut data)]);
    out.push(run_probe(prim("matmul"), &mut st, seed, fault, &|s| {
        let (a, b) = (input(s, 0)?, input(s, 1)?);
        s.graph.matmul(a, b)
    })?);
    let mut st = with_inputs(vec![uniform(&[2, 3, 4], -1.0, 1.0, &mut data), uniform(&[2, 5, 4], -1.0, 1.0, &mut data)]);
    out.push(run_probe(prim("bmm"), &mut st, seed, fault, &|s| {
        let (a, b) = (input(s, 0)?, input(s, 1)?);
        s.graph.bmm(a, b, true)
    })?);
    let mut st = with_inputs(vec![uniform(&[3, 6], -2.0, 2.0, &mut data)]);
    out.push(run_probe(prim("softmax"), &mut st, seed, fault, &|s| {
        let x = input(s, 0)?;
        s.graph.softmax(x)
    })?);
    let mut st = with_inputs(vec![uniform(&[2, 3, 4], -1.0, 1.0, &mut data)]);
    out.push(run_probe(prim("reduce"), &mut st, seed, fault, &|s| {
        let x = input(s, 0)?;
        let a = s.graph.sum(x, 2, false)?;
        let b = s.graph.mean(x, 2, false)?;
        let c = s.graph.max(x, 2, false)?;
        let ab = s.graph.add(a, b)?;
        s.graph.add(ab, c)
    })?);
    let mut st = with_inputs(vec![uniform(&[2, 3, 4], -1.0, 1.0, &mut data), uniform(&[2, 1, 4], -1.0, 1.0, &mut data)]);
    out.push(run_probe(prim("layout"), &mut st, seed, fault, &|s| {
        let (a, b) = (input(s, 0)?, input(s, 1)?);
        let c = s.graph.concat(&[a, b], 1)?;
        let p = s.graph.permute(c, &[2, 0, 1])?;
        s.graph.reshape(p, [4, 8])
    })?);

    // convolutions
    let mut st = with_inputs(vec![uniform(&[2, 3, 6, 5], -1.0, 1.0, &mut data)]);
    let conv = Conv2d::new(&mut st, init, "conv", 3, 4, 3, 2, 1, true)?;
    out.push(run_probe(prim("conv2d"), &mut st, seed, fault, &|s| {
        let x = input(s, 0)?;
        conv.forward(s, x)
    })?);
    let mut st = with_inputs(vec![uniform(&[2, 3, 3, 4], -1.0, 1.0, &mut data)]);
    let w = uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut data);
    st.register("tconv.weight", w, ParamKind::Weight)?;
    st.register("tconv.bias", uniform(&[2], -1.0, 1.0, &mut data), ParamKind::Bias)?;
    out.push(run_probe(prim("conv_transpose2d"), &mut st, seed, fault, &|s| {
        let x = input(s, 0)?;
        let (w, b) = (s.param("tconv.weight")?, s.param("tconv.bias")?);
        s.graph.conv_transpose2d(x, w, Some(b), 2, 0)
    })?);
    let mut st = with_inputs(vec![uniform(&[1, 2, 4, 6], -1.0, 1.0, &mut data)]);
    out.push(run_probe(prim("max_pool2d"), &mut st, seed, fault, &|s| {
        let x = input(s, 0)?;
        s.graph.max_pool2d(x, 2, 2)
    })?);

    // normalization and token layers
    let mut st = with_inputs(vec![uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut data)]);
    let bn = BatchNorm2d::new(&mut st, "bn", 3)?;
    for p in st.params_mut().filter(|p| p.name.starts_with("bn.")) {
        p.tensor = uniform(p.tensor.shape(), 0.5, 1.5, &mut data);
    }
    out.push(run_probe(layer("batch_norm"), &mut st, seed, fault, &|s| {
        let x = input(s, 0)?;
        bn.forward(s, x)
    })?);
    let mut st = with_inputs(vec![uniform(&[2, 5, 6], -1.0, 1.0, &mut data)]);
    let ln = LayerNorm::new(&mut st, "ln", 6)?;
    for p in st.params_mut().filter(|p| p.name.starts_with("ln.")) {
        p.tensor = uniform(p.tensor.shape(), 0.5, 1.5, &mut data);
    }
    out.push(run_probe(layer("layer_norm"), &mut st, seed, fault, &|s| {
        let x = input(s, 0)?;
        ln.forward(s, x)
    })?);
    let mut st = with_inputs(vec![uniform(&[2, 3, 4], -1.0, 1.0, &mut data)]);
    let lin = Linear::new(&mut st, init, "lin", 4, 5, true)?;
    out.push(run_probe(prim("linear"), &mut st, seed, fault, &|s| {
        let x = input(s, 0)?;
        lin.forward(s, x)
    })?);

    // window attention, unshifted and shifted with mask
    for (name, shift) in [("w_msa", 0), ("sw_msa", 2)] {
        let cfg = WindowAttentionConfig {
            window_size: 4,
            num_heads: 2,
            embed_dim: 8,
            shift,
            qkv_bias: true,
        };
        let mut st = with_inputs(vec![uniform(&[4, 16, 8], -1.0, 1.0, &mut data)]);
        let attn = WindowAttention::new(&mut st, init, "attn", cfg)?;
        randomize(&mut st, "attn.", 0.5, &mut data);
        let mask = if shift > 0 { Some(build_shift_mask::<f64>(8, 8, 4, 2)?) } else { None };
        out.push(run_probe(layer(name), &mut st, seed, fault, &|s| {
            let x = input(s, 0)?;
            attn.forward(s, x, mask.as_ref())
        })?);
    }
    let mut st = with_inputs(vec![uniform(&[1, 8, 8, 8], -1.0, 1.0, &mut data)]);
    let block = SwinBlock::new(&mut st, init, "swin", 8, 4, 2)?;
    randomize(&mut st, "swin.", 0.3, &mut data);
    out.push(run_probe(layer("swin_block"), &mut st, seed, fault, &|s| {
        let x = input(s, 0)?;
        block.forward(s, x)
    })?);

    let mut st = with_inputs(vec![uniform(&[2, 4, 8, 8], -1.0, 1.0, &mut data)]);
    let res = ResNetBlock::new(&mut st, init, "res", 4, 8, 2)?;
    out.push(run_probe(layer("resnet_basic_block"), &mut st, seed, fault, &|s| {
        let x = input(s, 0)?;
        res.forward(s, x)
    })?);
    let mut st = with_inputs(vec![uniform(&[2, 8, 4, 4], -1.0, 1.0, &mut data)]);
    let up = UpsampleBlock::new(&mut st, init, "up", 8, 4)?;
    out.push(run_probe(layer("upsample_block"), &mut st, seed, fault, &|s| {
        let x = input(s, 0)?;
        up.forward(s, x)
    })?);

    let stage_cfg = CoSwinStageConfig {
        in_channels: 8,
        out_channels: 8,
        num_res_blocks: 1,
        window: WindowAttentionConfig {
            window_size: 4,
            num_heads: 2,
            embed_dim: 8,
            shift: 0,
            qkv_bias: true,
        },
        downsample: true,
        fusion: Fusion::Tanh,
    };
    let mut st = with_inputs(vec![uniform(&[1, 8, 16, 16], -1.0, 1.0, &mut data)]);
    let stage = CoSwinStage::new(&mut st, init, "stage", stage_cfg, true)?;
    out.push(run_probe(layer("coswin_block"), &mut st, seed, fault, &|s| {
        let x = input(s, 0)?;
        stage.forward(s, x)
    })?);

    let mut st = with_inputs(vec![uniform(&[1, 4, 8, 8], -1.0, 1.0, &mut data), uniform(&[1, 4, 8, 8], -1.0, 1.0, &mut data)]);
    let cf = CFilter::new(&mut st, init, "cfilter", 7)?;
    out.push(run_probe(layer("cfilter"), &mut st, seed, fault, &|s| {
        let (a, b) = (input(s, 0)?, input(s, 1)?);
        cf.forward(s, a, b)
    })?);

    // losses
    let target = Tensor::<f64>::from_fn([2, 1, 4, 4], |_| (data.uniform() < 0.3) as u8 as f64);
    let pred = Tensor::from_fn([2, 1, 4, 4], |i| {
        if target.data()[i] > 0.5 {
            data.range(0.65, 0.95)
        } else {
            data.range(0.05, 0.35)
        }
    });
    let mut st = with_inputs(vec![pred]);
    out.push(run_probe(prim("wbce"), &mut st, seed, fault, &|s| {
        let p = input(s, 0)?;
        loss::wbce(s, p, &target, 1.5)
    })?);
    let mut st = with_inputs(vec![Tensor::scalar(0.7), Tensor::scalar(2.3)]);
    st.register(loss::S1, Tensor::from_f64([1], &[0.4])?, ParamKind::LossWeight)?;
    st.register(loss::S2, Tensor::from_f64([1], &[-0.3])?, ParamKind::LossWeight)?;
    out.push(run_probe(layer("total_loss"), &mut st, seed, fault, &|s| {
        let (w, l2) = (input(s, 0)?, input(s, 1)?);
        let (s1, s2) = (s.param(loss::S1)?, s.param(loss::S2)?);
        loss::total_loss(s, w, l2, s1, s2)
    })?);

    out.push(network_check(seed, fault)?);
    Ok(out)
}

fn randomize(store: &mut ParamStore<f64>, prefix: &str, scale: f64, rng: &mut Rng) {
    for p in store.params_mut().filter(|p| p.name.starts_with(prefix)) {
        let shape = p.tensor.shape().to_vec();
        p.tensor = if p.name.contains("norm") && p.name.ends_with("gamma") {
            uniform(&shape, 0.5, 1.5, rng)
        } else {
            uniform(&shape, -scale, scale, rng)
        };
    }
}

/// Configuration used by the end-to-end check.
pub fn network_check_config() -> NetworkConfig {
    NetworkConfig {
        tile_size: 32,
        widths: [4, 8, 8],
        window_size: 2,
        num_heads: 2,
        res_blocks: 1,
        ..NetworkConfig::default()
    }
}

/// Full forward plus total loss on a 2x3x32x32 input.
fn network_check(seed: u64, fault: Option<Fault>) -> Result<LayerCheck> {
    let cfg = network_check_config();
    let mut store = ParamStore::new();
    let net = RoadNet::new(&mut store, &cfg, seed)?;
    loss::register_task_weights(&mut store)?;
    let mut data = Rng::new(seed, Purpose::Fixture);
    let image = Tensor::<f64>::from_fn([2, 3, 32, 32], |_| data.uniform());
    let target = Tensor::<f64>::from_fn([2, 1, 32, 32], |_| (data.uniform() < 0.25) as u8 as f64);
    let probe = Probe {
        name: "network_32x32",
        tolerance: LAYER_TOLERANCE,
        train: true,
        sampling: Sampling::Global(NETWORK_COORDS),
    };
    run_probe(probe, &mut store, seed, fault, &|s| {
        let x = s.input(image.clone());
        let p = net.forward(s, x)?;
        let w = loss::wbce(s, p, &target, 1.5)?;
        let l2 = loss::l2_penalty(s)?;
        let (s1, s2) = (s.param(loss::S1)?, s.param(loss::S2)?);
        loss::total_loss(s, w, l2, s1, s2)
    })
}
