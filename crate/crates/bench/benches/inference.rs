//! Benchmarks of estimation and inference on a prebuilt centering matrix.

use clusteriv::{estimate, invert_ar, jackknife_variance, numerator_stat, CenteringMethod};
use clusteriv_bench::PanelFixture;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("inference");
    for &(clusters, periods) in &[(500usize, 5usize), (2000, 3)] {
        let fixture = PanelFixture::new(clusters, periods, 13);
        let astar = fixture.astar(CenteringMethod::LeaveOut);
        let n = clusters * periods;
        group.bench_with_input(
            BenchmarkId::new("estimate", n),
            &(&fixture, &astar),
            |b, (f, a)| b.iter(|| estimate(&f.data, a).unwrap()),
        );
        group.bench_with_input(
            BenchmarkId::new("jackknife", n),
            &(&fixture, &astar),
            |b, (f, a)| {
                b.iter(|| {
                    let stat = numerator_stat(&f.data, a, 0.5).unwrap();
                    jackknife_variance(&stat)
                })
            },
        );
        group.bench_with_input(
            BenchmarkId::new("invert_ar", n),
            &(&fixture, &astar),
            |b, (f, a)| b.iter(|| invert_ar(&f.data, a, 0.05).unwrap()),
        );
    }
    group.finish();
}

criterion_group!(benches, bench_inference);
criterion_main!(benches);
