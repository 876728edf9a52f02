use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use meshloop::{Rng, SchemeKind, SchemeSpec};
use meshloop_bench::{model, tokens};

fn schemes() -> Vec<(&'static str, SchemeSpec)> {
    vec![
        ("base", SchemeSpec::new(SchemeKind::Base)),
        ("residual", SchemeSpec::new(SchemeKind::Residual)),
        ("anchor", SchemeSpec::new(SchemeKind::Anchor)),
        ("dynamic_comb", SchemeSpec::new(SchemeKind::DynamicComb)),
        ("mesh", SchemeSpec::mesh(6)),
    ]
}

fn bench_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward 1+2R3+1 d64 L64");
    let mut rng = Rng::new(3);
    let toks = tokens(&mut rng, 64);
    for (name, scheme) in schemes() {
        let m = model("1+2R3+1", scheme, 64, 64);
        g.bench_with_input(BenchmarkId::from_parameter(name), &m, |b, m| b.iter(|| m.forward(&toks).unwrap()));
    }
    g.finish();
}

fn bench_backward(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss+grad 1+2R3+1 d64 L64");
    let mut rng = Rng::new(4);
    let toks = tokens(&mut rng, 64);
    let targets = tokens(&mut rng, 64);
    for (name, scheme) in schemes() {
        let m = model("1+2R3+1", scheme, 64, 64);
        g.bench_with_input(BenchmarkId::from_parameter(name), &m, |b, m| {
            b.iter(|| m.loss_and_grads(&toks, &targets).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_forward, bench_backward);
criterion_main!(benches);
