use criterion::{black_box, criterion_group, criterion_main, Criterion};

use coswin::dataio::synth_sample;
use coswin::dataio::SynthConfig;
use coswin::swin::{build_shift_mask, WindowAttention, WindowAttentionConfig};
use coswin::train::train_step;
use coswin::{Graph, NetworkConfig, ParamStore, Purpose, RoadNet, Rng, Session, Tensor};

fn conv(c: &mut Criterion) {
    let mut rng = Rng::new(0, Purpose::Fixture);
    let x = Tensor::<f32>::from_fn([4, 32, 32, 32], |_| rng.range(-1.0, 1.0) as f32);
    let w = Tensor::<f32>::from_fn([32, 32, 3, 3], |_| rng.range(-0.1, 0.1) as f32);
    c.bench_function("conv2d 4x32x32x32 k3 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true);
            let wv = g.leaf(w.clone(), true);
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let l = g.sum_all(y).unwrap();
            g.backward(l).unwrap();
            black_box(g.value(l).data()[0])
        })
    });
}

fn attention(c: &mut Criterion) {
    let cfg = WindowAttentionConfig {
        window_size: 4,
        num_heads: 2,
        embed_dim: 64,
        shift: 2,
        qkv_bias: true,
    };
    let mut rng = Rng::new(1, Purpose::Fixture);
    let mut store = ParamStore::<f32>::new();
    let attn = WindowAttention::new(&mut store, &mut rng, "a", cfg).unwrap();
    let mask = build_shift_mask::<f32>(16, 16, 4, 2).unwrap();
    let x = Tensor::<f32>::from_fn([4 * 16, 16, 64], |_| rng.range(-1.0, 1.0) as f32);
    c.bench_function("shifted window attention 64 windows fwd+bwd", |b| {
        b.iter(|| {
            let mut s = Session::new(&mut store, true);
            let xv = s.input(x.clone());
            let y = attn.forward(&mut s, xv, Some(&mask)).unwrap();
            let l = s.graph.sum_all(y).unwrap();
            s.backward(l).unwrap();
        })
    });
}

fn step(c: &mut Criterion) {
    let samples: Vec<_> = (0..4).map(|i| synth_sample(&SynthConfig::default(), i)).collect();
    let refs: Vec<_> = samples.iter().collect();
    let mut group = c.benchmark_group("train step batch 4 at 64x64");
    group.sample_size(10);
    for (name, cfg) in [("compact", NetworkConfig::compact()), ("default", NetworkConfig::default())] {
        let mut store = ParamStore::<f32>::new();
        let net = RoadNet::new(&mut store, &cfg, 0).unwrap();
        coswin::loss::register_task_weights(&mut store).unwrap();
        group.bench_function(name, |b| b.iter(|| train_step(&net, &mut store, &refs, 1.5).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, conv, attention, step);
criterion_main!(benches);
