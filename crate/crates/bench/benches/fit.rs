use criterion::{criterion_group, criterion_main, Criterion};
use detmlp::estimate::{self, FitConfig};
use detmlp::{CostKind, ParameterMask};
use detmlp_bench::fixture;

fn fitting(c: &mut Criterion) {
    let (w, data) = fixture(500);
    let arch = *w.arch();
    let mask = ParameterMask::all_free(arch);
    let cfg = FitConfig {
        n_starts: 4,
        seed: 1,
        ..FitConfig::default()
    };
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    group.bench_function("minimize_log_det_n500", |b| {
        b.iter(|| estimate::minimize(&data, arch, &mask, &cfg, &CostKind::LogDet).unwrap())
    });
    group.bench_function("minimize_sum_squares_n500", |b| {
        b.iter(|| estimate::minimize(&data, arch, &mask, &cfg, &CostKind::SumSquares).unwrap())
    });
    group.finish();
}

criterion_group!(benches, fitting);
criterion_main!(benches);
