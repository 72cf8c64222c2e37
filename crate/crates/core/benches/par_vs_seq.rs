use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use relaynet::dataset::{generate_dataset, DatasetConfig};
use relaynet::model::{sample_instance, EhParams, GeometryConfig, SystemParams};
use relaynet::par::{self, Exec};
use relaynet::selection::{bba, enumerate_optimal, SearchOpts};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn labeling(c: &mut Criterion) {
    let mut g = c.benchmark_group("dataset_labeling");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = DatasetConfig::new(3, 2, 64, 16, 16, 1);
        g.bench_function(BenchmarkId::new(name, "n3k2x96"), |b| b.iter(|| generate_dataset(&cfg, exec).unwrap()));
    }
    g.finish();
}

fn enumeration(c: &mut Criterion) {
    let inst = sample_instance(5, 2, &GeometryConfig::default(), &EhParams::default(), &SystemParams::default(), 3).unwrap();
    let mut g = c.benchmark_group("enumerate_optimal");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = SearchOpts { exec, ..Default::default() };
        g.bench_function(BenchmarkId::new(name, "n5k2"), |b| b.iter(|| enumerate_optimal(&inst, &opts).unwrap()));
    }
    g.finish();
}

fn batch_bba(c: &mut Criterion) {
    let insts: Vec<_> = (0..32)
        .map(|s| sample_instance(4, 2, &GeometryConfig::default(), &EhParams::default(), &SystemParams::default(), s).unwrap())
        .collect();
    let mut g = c.benchmark_group("bba_batch");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = SearchOpts { exec: Exec::Sequential, ..Default::default() };
        g.bench_function(BenchmarkId::new(name, "32xn4k2"), |b| {
            b.iter(|| par::map_indexed(exec, insts.len(), |i| bba(&insts[i], &opts).unwrap().schedule.total))
        });
    }
    g.finish();
}

criterion_group!(benches, labeling, enumeration, batch_bba);
criterion_main!(benches);
