use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use meshloop::diagnostics::{cka_rbf, effort};
use meshloop::numerics::{matmul, singular_values};
use meshloop::Rng;
use meshloop_bench::random_matrix;

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    let mut rng = Rng::new(1);
    for n in [64, 128, 256] {
        let a = random_matrix(&mut rng, n, n);
        let b = random_matrix(&mut rng, n, n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn bench_diagnostics(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let x = random_matrix(&mut rng, 128, 64);
    let y = random_matrix(&mut rng, 128, 64);
    c.bench_function("singular_values 128x64", |b| b.iter(|| singular_values(black_box(&x), 64).unwrap()));
    c.bench_function("cka_rbf 128x64", |b| b.iter(|| cka_rbf(black_box(&x), black_box(&y), 1.0).unwrap()));
    c.bench_function("effort 128x64", |b| b.iter(|| effort(black_box(&x), black_box(&y)).unwrap()));
}

criterion_group!(benches, bench_matmul, bench_diagnostics);
criterion_main!(benches);
