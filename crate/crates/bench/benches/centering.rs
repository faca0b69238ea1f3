//! Benchmarks of the centering-matrix constructions.

use clusteriv::CenteringMethod;
use clusteriv_bench::PanelFixture;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_astar");
    for &(clusters, periods) in &[(100usize, 5usize), (500, 5), (2000, 3)] {
        let fixture = PanelFixture::new(clusters, periods, 7);
        let n = clusters * periods;
        group.bench_with_input(
            BenchmarkId::new("leave_out", n),
            &fixture,
            |b, f| b.iter(|| f.astar(CenteringMethod::LeaveOut)),
        );
        group.bench_with_input(BenchmarkId::new("block_b", n), &fixture, |b, f| {
            b.iter(|| f.astar(CenteringMethod::BlockB))
        });
    }
    // The exact vectorized construction is only usable at oracle scale.
    let small = PanelFixture::new(20, 5, 7);
    group.bench_function("vec_oracle/100", |b| {
        b.iter(|| small.astar(CenteringMethod::VecOracle))
    });
    group.finish();
}

criterion_group!(benches, bench_build);
criterion_main!(benches);
