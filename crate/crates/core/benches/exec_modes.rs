//! Sequential versus thread-pool execution of the hot loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use ugfuse::dataio::{generate, Split, SyntheticSpec};
use ugfuse::evalkit::{distance_matrix, embed_split, Metric};
use ugfuse::objective::train::{batch_gradients, epoch_batches, TrainSet};
use ugfuse::objective::{Checkpoint, TrainConfig, Variant};
use ugfuse::Exec;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn bench(c: &mut Criterion) {
    let ds = generate(&SyntheticSpec {
        n: 32,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        variant: Variant::E,
        n: 32,
        ..TrainConfig::default()
    };
    let ck = Checkpoint::initial(&cfg, &ds).unwrap();
    let model = ck.model().unwrap();
    let ts = TrainSet::new(&ds);
    let batch = epoch_batches(&cfg, &ts, 0).unwrap().swap_remove(0);

    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                batch_gradients(&model, &cfg, &ck.params, black_box(&batch), 0, exec).unwrap()
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("embed_gallery");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                embed_split(&model, &ck.params, black_box(&ds), Split::Gallery, exec).unwrap()
            })
        });
    }
    g.finish();

    let q = embed_split(&model, &ck.params, &ds, Split::Query, Exec::Parallel).unwrap();
    let gal = embed_split(&model, &ck.params, &ds, Split::Gallery, Exec::Parallel).unwrap();
    let mut g = c.benchmark_group("distance_matrix");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                distance_matrix(
                    black_box(&q.features),
                    &gal.features,
                    Metric::Euclidean,
                    exec,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
