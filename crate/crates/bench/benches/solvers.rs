use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use wmra_bench::coupled_instance;
use wmra_core::{oracle_grid, solve_aux, solve_coupled, UtilityModel};

fn bench_coupled(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_coupled");
    for n in [10usize, 100, 1000] {
        let problem = coupled_instance(n, 7);
        group.bench_with_input(BenchmarkId::from_parameter(n), &problem, |b, p| {
            b.iter(|| solve_coupled(black_box(p)).unwrap())
        });
    }
    group.finish();
}

fn bench_aux(c: &mut Criterion) {
    c.bench_function("solve_aux/log", |b| {
        b.iter(|| solve_aux(black_box(8.1), 1.0, 8.2, &UtilityModel::Log, 0.0092))
    });
}

fn bench_oracle(c: &mut Criterion) {
    let problem = coupled_instance(3, 11);
    c.bench_function("oracle_grid/3x1e-3", |b| b.iter(|| oracle_grid(black_box(&problem), 1e-3).unwrap()));
}

criterion_group!(benches, bench_coupled, bench_aux, bench_oracle);
criterion_main!(benches);
