use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use drp_core::backbones::BackboneConfig;
use drp_core::encoding::SessionExample;
use drp_core::metrics::auc;
use drp_core::numerics::rng_from_seed;
use drp_core::synthworld::{generate_world, WorldConfig};
use drp_core::training::{Adam, JointModel, TrainConfig, Variant};
use rand::Rng;

fn small_world() -> WorldConfig {
    WorldConfig {
        users: 200,
        queries: 300,
        items: 2_000,
        interactions: 5_000,
        ..Default::default()
    }
}

fn train_step(c: &mut Criterion) {
    let world = small_world();
    let data = generate_world(&world).unwrap();
    let batch: Vec<&SessionExample> = data.iter().take(256).map(|e| &e.example).collect();
    let mut group = c.benchmark_group("train_step_256");
    for variant in [Variant::Full, Variant::BaseFixed] {
        let cfg = TrainConfig {
            variant,
            ..Default::default()
        };
        let model =
            JointModel::new(world.feature_spec(), &BackboneConfig::default(), &cfg).unwrap();
        group.bench_function(variant.name(), |b| {
            b.iter_batched(
                || (model.clone(), Adam::new(cfg.learning_rate)),
                |(mut m, mut adam)| black_box(m.train_step(&batch, &mut adam).unwrap()),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn auc_bench(c: &mut Criterion) {
    let mut rng = rng_from_seed(5);
    let n = 100_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
    c.bench_function("auc_100k", |b| {
        b.iter(|| auc(black_box(&scores), black_box(&labels)).unwrap())
    });
}

fn generate(c: &mut Criterion) {
    let world = small_world();
    let mut group = c.benchmark_group("generate");
    group.sample_size(10);
    group.bench_function("world_5k", |b| {
        b.iter(|| generate_world(black_box(&world)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, train_step, auc_bench, generate);
criterion_main!(benches);
