//! Forward-pass and training-step benchmarks across model depths.

use criterion::{criterion_group, criterion_main, Criterion};

use icl_core::model::{transformer_forward, ModelConfig, ModelParams};
use icl_core::numerics::rng::{Seed, SeedStream};
use icl_core::training::{eval_loss, meta_train, TaskSpec, TrainConfig};

fn bench_forward(c: &mut Criterion) {
    let task = TaskSpec::default_linear();
    let mut stream = SeedStream::new(Seed(7));
    let seq = task.tokens(&task.sample(&mut stream)).unwrap();
    let mut group = c.benchmark_group("forward");
    for depth in [1usize, 2, 5] {
        let cfg = if depth == 1 {
            ModelConfig::single_lsa(task.token_dim())
        } else {
            ModelConfig::deep_lsa(task.token_dim(), depth, false)
        };
        let mut ps = SeedStream::new(Seed(1));
        let params = ModelParams::init(&cfg, &mut ps).unwrap();
        group.bench_function(format!("lsa_depth{depth}"), |b| {
            b.iter(|| transformer_forward(&cfg, &params, &seq).unwrap())
        });
    }
    group.finish();
}

fn bench_eval_loss(c: &mut Criterion) {
    let task = TaskSpec::default_linear();
    let cfg = ModelConfig::single_lsa(task.token_dim());
    let mut ps = SeedStream::new(Seed(1));
    let params = ModelParams::init(&cfg, &mut ps).unwrap();
    let mut data = SeedStream::new(Seed(2));
    let batch = task.sample_batch(256, &mut data).unwrap();
    c.bench_function("eval_loss/batch256", |b| {
        b.iter(|| eval_loss(&params, &cfg, &batch))
    });
}

// includes task sampling, the backward pass and the Adam update
fn bench_train_step(c: &mut Criterion) {
    let task = TaskSpec::default_linear();
    let cfg = TrainConfig {
        batch_size: 256,
        steps: 1,
        eval_every: 10,
        eval_tasks: 1,
        ..TrainConfig::defaults(
            ModelConfig::single_lsa(task.token_dim()),
            task,
            Seed(1),
        )
    };
    c.bench_function("train_step/batch256", |b| b.iter(|| meta_train(&cfg).unwrap()));
}

criterion_group!(benches, bench_forward, bench_eval_loss, bench_train_step);
criterion_main!(benches);
