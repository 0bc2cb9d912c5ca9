use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use nncluster::engine::{Cluster, EngineOptions};
use nncluster::harness::{verify_with, Batch, Mode, RunConfig};
use nncluster::{Domain, Schedule};

fn step(c: &mut Criterion) {
    let d = Domain::unit_cube(32).unwrap();
    let mut group = c.benchmark_group("step_32x32x32_20ppc");
    group.sample_size(10);
    for workers in [4, 16] {
        for (name, schedule) in [("sequential", Schedule::Sequential), ("parallel", Schedule::Parallel)] {
            let options = EngineOptions {
                schedule,
                ..Default::default()
            };
            group.bench_with_input(BenchmarkId::new(name, workers), &workers, |b, &w| {
                b.iter_batched(
                    || Cluster::sampled(d.clone(), w, 20, 1, options).unwrap(),
                    |mut cluster| black_box(cluster.step().unwrap()),
                    BatchSize::LargeInput,
                )
            });
        }
    }
    group.finish();
}

fn verification(c: &mut Criterion) {
    let config = RunConfig {
        mode: Mode::Verify,
        cells: [8; 3],
        workers: vec![1, 4],
        parcels_per_cell: 40,
        configs: 16,
        ..Default::default()
    };
    let mut group = c.benchmark_group("verify_16_configs");
    group.sample_size(10);
    for (name, batch) in [("sequential", Batch::Sequential), ("parallel", Batch::Parallel)] {
        group.bench_function(name, |b| b.iter(|| black_box(verify_with(&config, batch).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, step, verification);
criterion_main!(benches);
