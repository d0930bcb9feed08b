use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lorentzian_bench::ConvFixture;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("lorentz_conv2d");
    group.sample_size(10);
    for &(size, cin, cout) in &[(16, 8, 16), (32, 16, 32)] {
        let fx = ConvFixture::new(8, size, cin, cout);
        let label = format!("{size}x{size}x{cin}->{cout}");
        group.bench_with_input(BenchmarkId::new("efficient", &label), &fx, |b, fx| b.iter(|| fx.run(false)));
        group.bench_with_input(BenchmarkId::new("naive", &label), &fx, |b, fx| b.iter(|| fx.run(true)));
    }
    group.finish();
}

criterion_group!(benches, conv);
criterion_main!(benches);
