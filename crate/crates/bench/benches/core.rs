use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mvd_core::harness::{resolve, Trainer};
use mvd_core::mvdloss::{mvd_loss, MvdConfig, RepresentationBundle};
use mvd_core::numcore::{Graph, Rng, Stream, Tensor};

fn normal(rng: &mut Rng, shape: Vec<usize>) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.standard_normal() as f32).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = Rng::new(0, Stream::Init);
    let x = normal(&mut rng, vec![32, 9, 48, 48]);
    let w = normal(&mut rng, vec![32, 9, 3, 3]);
    c.bench_function("conv2d 32x9x48x48 stride 2, forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let y = g.conv2d(xv, wv, None, 2).unwrap();
            let l = g.mean(y);
            black_box(g.backward(l).unwrap());
        })
    });
}

fn losses(c: &mut Criterion) {
    let mut rng = Rng::new(1, Stream::Init);
    let cfg = MvdConfig::default();
    let reps: Vec<Tensor<f32>> = (0..6).map(|_| normal(&mut rng, vec![128, 50])).collect();
    c.bench_function("mvd loss, 2 cameras, batch 128, dim 50, forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let v: Vec<_> = reps.iter().map(|t| g.leaf(t.clone())).collect();
            let bundle = RepresentationBundle {
                shared: v[0..2].to_vec(),
                private: v[2..4].to_vec(),
                private_next: v[4..6].to_vec(),
            };
            let l = mvd_loss(&mut g, &bundle, &cfg, None).unwrap();
            black_box(g.backward(l.total).unwrap());
        })
    });
}

fn update(c: &mut Criterion) {
    let text = "[algo]\nbatch_size = 32\ninit_steps = 64\n[run]\neval_interval = 1000000\n";
    let cfg = resolve(text, "bench", None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg, 0, dir.path()).unwrap();
    t.run_until(64).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("env step + SAC/MVD update, 48x48, batch 32", |b| {
        b.iter_batched(|| (), |_| t.step().unwrap(), BatchSize::PerIteration)
    });
    group.finish();
}

criterion_group!(benches, conv, losses, update);
criterion_main!(benches);
