//! Benchmarks for the pipeline hot paths: loss evaluation with gradients,
//! direct mask fitting, connected components, and classifier training.

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use glomkit_bench::{dataset, noisy_prediction, scene_128};
use glomkit_core::hier::{train, TrainConfig};
use glomkit_core::instances::connected_components;
use glomkit_core::losses::{direct_fit, evaluate, LossConfig, LossId};

fn bench_loss_eval(c: &mut Criterion) {
    let scene = scene_128();
    let p = noisy_prediction(&scene, 77);
    let cfg = LossConfig::default();
    let mut group = c.benchmark_group("loss_eval_128");
    for loss in LossId::ALL {
        group.bench_function(loss.name(), |b| {
            b.iter(|| {
                evaluate(loss, black_box(&p), &scene.mask, &scene.instances, &cfg)
                    .expect("loss evaluates")
            })
        });
    }
    group.finish();
}

fn bench_direct_fit(c: &mut Criterion) {
    let scene = scene_128();
    let cfg = LossConfig::default();
    c.bench_function("direct_fit_compound_10_steps", |b| {
        b.iter(|| {
            direct_fit(black_box(&scene), LossId::Compound, 10, 800.0, 0, &cfg)
                .expect("fit runs")
        })
    });
}

fn bench_connected_components(c: &mut Criterion) {
    let scene = scene_128();
    c.bench_function("connected_components_128", |b| {
        b.iter(|| connected_components(black_box(&scene.mask), 0.5))
    });
}

fn bench_train(c: &mut Criterion) {
    let ds = dataset();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        lr: 1e-3,
        d1: 16,
        d2: 8,
        dropout_rate: 0.3,
        seed: 5,
        ..TrainConfig::default()
    };
    c.bench_function("train_one_epoch_default_dataset", |b| {
        b.iter(|| train(black_box(&ds), &cfg).expect("training runs"))
    });
}

criterion_group!(
    benches,
    bench_loss_eval,
    bench_direct_fit,
    bench_connected_components,
    bench_train
);
criterion_main!(benches);
