use capsroute_bench::{BenchCase, Workload};
use capsroute_core::routing::{route, RoutingConfig, RoutingMethod};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn routing_methods(c: &mut Criterion) {
    let case = BenchCase::default();
    let work = Workload::generate(&case).expect("workload");
    let cfg = RoutingConfig {
        iterations: case.iterations,
        ..RoutingConfig::default()
    };
    let mut group = c.benchmark_group(format!("route_{}x{}_batch{}", case.n_in, case.n_out, case.batch));
    for method in [RoutingMethod::Frms, RoutingMethod::Frem, RoutingMethod::EmBaseline] {
        group.bench_with_input(BenchmarkId::from_parameter(method), &method, |b, &method| {
            b.iter(|| {
                for votes in &work.windows {
                    std::hint::black_box(route(method, votes, &cfg, &work.params).expect("route"));
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, routing_methods);
criterion_main!(benches);
