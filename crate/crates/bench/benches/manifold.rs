use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lorentzian::optim::{OptimConfig, OptimKind, Optimizer};
use lorentzian::params::Grads;
use lorentzian::Lorentz;
use lorentzian_bench::{lorentz_param, points, rng};

fn maps(c: &mut Criterion) {
    let geo = Lorentz::new(1.0, 16).unwrap();
    let p = points(&mut rng(2), &geo, 2);
    let (x, y) = (&p[0], &p[1]);
    let v = geo.log(x, y);
    c.bench_function("exp", |b| b.iter(|| geo.exp(black_box(x), black_box(&v))));
    c.bench_function("log", |b| b.iter(|| geo.log(black_box(x), black_box(y))));
    c.bench_function("dist", |b| b.iter(|| geo.dist(black_box(x), black_box(y))));
    c.bench_function("transport", |b| b.iter(|| geo.transport(black_box(x), black_box(y), black_box(&v))));
}

fn optimizer_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("optimizer_step");
    for kind in [OptimKind::Rsgd, OptimKind::Radam, OptimKind::Radamw] {
        let (store, id, grad) = lorentz_param(256, 8);
        let mut grads = Grads::zeros_like(&store);
        grads.set_param(id, grad);
        let cfg = OptimConfig { kind, lr: 1e-3, weight_decay: 0.01, ..OptimConfig::default() };
        group.bench_function(format!("{kind:?}").to_lowercase(), |b| {
            b.iter_batched(
                || (store.clone(), Optimizer::new(cfg.clone()).unwrap()),
                |(mut s, mut opt)| opt.step(&mut s, &grads).unwrap(),
                criterion::BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, maps, optimizer_step);
criterion_main!(benches);
