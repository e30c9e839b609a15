//! Hot-path benchmarks: raw matmul, the prompted forward pass, the full
//! backward sweep, one sharpness-aware optimizer step, and stream
//! construction.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use gcl_core::harness::generate_synthetic;
use gcl_core::model::{forward, Backbone, BackboneConfig, OutputHead, PromptSet};
use gcl_core::optim::sam_step;
use gcl_core::stream::build_stream;
use gcl_core::tensor::{Tape, Tensor};
use gcl_core::{
    BaseOptimizer, Example, GradVector, ParameterStore, StreamConfig, SyntheticDatasetSpec,
};

const CLASSES: usize = 20;
const FEATURES: usize = 16;
const EMBED: usize = 16;
const BATCH: usize = 32;

struct Fixture {
    store: ParameterStore,
    backbone: Backbone,
    prompts: PromptSet,
    head: OutputHead,
    batch: Vec<Example>,
}

fn fixture() -> Fixture {
    let mut store = ParameterStore::new();
    let mut backbone = Backbone::new(BackboneConfig {
        input_dim: FEATURES,
        embed_dim: EMBED,
        depth: 1,
        heads: 2,
        token_len: 4,
    })
    .unwrap();
    backbone.init_params(&mut store, 0).unwrap();
    backbone.freeze(&mut store);
    let prompts = PromptSet::init_random(4, EMBED, &mut store, 0).unwrap();
    let head = OutputHead::new("head", CLASSES, EMBED);
    head.init_params(&mut store, 0).unwrap();
    let dataset = dataset();
    let batch = dataset.train[..BATCH].to_vec();
    Fixture { store, backbone, prompts, head, batch }
}

fn dataset() -> gcl_core::Dataset {
    let spec = SyntheticDatasetSpec {
        classes: CLASSES,
        features: FEATURES,
        train_per_class: 32,
        test_per_class: 8,
        margin: 1.0,
        noise: 0.15,
    };
    generate_synthetic(&spec, 0, "bench-data").unwrap()
}

fn loss_and_grad(
    f: &Fixture,
    store: &ParameterStore,
    batch: &[Example],
) -> gcl_core::Result<(f64, GradVector)> {
    let mut tape = Tape::new();
    let p = f.prompts.leaf(&mut tape, store)?;
    let logits = forward(&mut tape, store, &f.backbone, Some(p), &f.head, batch)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let bits = vec![true; CLASSES];
    let loss = tape.masked_softmax_cross_entropy(logits, &labels, &bits)?;
    Ok((tape.scalar(loss)?, tape.backward(loss, store)?))
}

fn bench_matmul(c: &mut Criterion) {
    let a = Tensor::from_vec(vec![64, 64], (0..64 * 64).map(|i| i as f64 * 1e-3).collect())
        .unwrap();
    let b = Tensor::from_vec(vec![64, 64], (0..64 * 64).map(|i| (i % 97) as f64 * 1e-2).collect())
        .unwrap();
    c.bench_function("matmul_64x64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let na = tape.constant(black_box(a.clone()));
            let nb = tape.constant(black_box(b.clone()));
            black_box(tape.matmul(na, nb).unwrap())
        })
    });
}

fn bench_forward(c: &mut Criterion) {
    let f = fixture();
    c.bench_function("forward_batch32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let p = f.prompts.leaf(&mut tape, &f.store).unwrap();
            black_box(
                forward(&mut tape, &f.store, &f.backbone, Some(p), &f.head, &f.batch).unwrap(),
            )
        })
    });
}

fn bench_backward(c: &mut Criterion) {
    let f = fixture();
    c.bench_function("loss_backward_batch32", |bench| {
        bench.iter(|| black_box(loss_and_grad(&f, &f.store, &f.batch).unwrap()))
    });
}

fn bench_sam_step(c: &mut Criterion) {
    let f = fixture();
    c.bench_function("sam_step_batch32", |bench| {
        bench.iter_batched(
            || (f.store.clone(), BaseOptimizer::adam(0.01, f.store.trainable_len())),
            |(mut store, mut opt)| {
                let mut loss_fn = |s: &ParameterStore, b: &[Example]| loss_and_grad(&f, s, b);
                black_box(sam_step(&mut store, &mut loss_fn, &f.batch, 0.05, &mut opt).unwrap())
            },
            criterion::BatchSize::SmallInput,
        )
    });
}

fn bench_stream_build(c: &mut Criterion) {
    let data = dataset();
    let config = StreamConfig::default();
    c.bench_function("stream_build_20c_640n", |bench| {
        bench.iter(|| black_box(build_stream(&data, &config).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_forward,
    bench_backward,
    bench_sam_step,
    bench_stream_build
);
criterion_main!(benches);
