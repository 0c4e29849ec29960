use criterion::{criterion_group, criterion_main, Criterion};
use wmra_bench::reference;
use wmra_core::{run_controller, ControllerKind, RunOptions, UtilityModel};

fn bench_runs(c: &mut Criterion) {
    let (fleet, scenario, consts) = reference(1.0);
    let opts = RunOptions::default();
    let mut group = c.benchmark_group("run_controller_1000_slots");
    group.sample_size(10);
    for kind in [ControllerKind::Wmra, ControllerKind::Greedy] {
        group.bench_function(kind.to_string(), |b| {
            b.iter(|| run_controller(kind, &scenario, &fleet, &consts, &UtilityModel::Log, 1000, &opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_runs);
criterion_main!(benches);
