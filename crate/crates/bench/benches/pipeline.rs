use std::hint::black_box;
use std::sync::Arc;

use cloudsched_bench::sample_graph;
use cloudsched_core::gnn::{partition_graph, GnnModel};
use cloudsched_core::scheduler::PolicyKind;
use cloudsched_core::sim::{run, SimConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("embed");
    for pms in [8, 32, 128] {
        let graph = sample_graph(pms, 1);
        let gcn = GnnModel::default_gcn(0);
        let gated = GnnModel::default_gated(0);
        group
            .bench_with_input(BenchmarkId::new("gcn", pms), &graph, |b, g| b.iter(|| gcn.embed(black_box(g)).unwrap()));
        group.bench_with_input(BenchmarkId::new("gated", pms), &graph, |b, g| {
            b.iter(|| gated.embed(black_box(g)).unwrap())
        });
    }
    group.finish();
}

fn partition(c: &mut Criterion) {
    let mut group = c.benchmark_group("partition");
    for (pms, pending) in [(8, 4), (64, 32)] {
        let graph = sample_graph(pms, pending);
        group.bench_with_input(BenchmarkId::from_parameter(graph.len()), &graph, |b, g| {
            b.iter(|| partition_graph(black_box(g), 4, 0).unwrap())
        });
    }
    group.finish();
}

fn simulate(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    group.bench_function("first_fit", |b| b.iter(|| run(black_box(&SimConfig::seeded(42))).unwrap()));
    let counter = SimConfig {
        policy: PolicyKind::Counter,
        preloaded_model: Some(Arc::new(GnnModel::default_gcn(0))),
        ..SimConfig::seeded(42)
    };
    group.bench_function("counter_untrained", |b| b.iter(|| run(black_box(&counter)).unwrap()));
    group.finish();
}

criterion_group!(benches, forward, partition, simulate);
criterion_main!(benches);
