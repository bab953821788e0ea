use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use itta_core::adapt::{AdaptConfig, AdaptState};
use itta_core::data::{default_domain_specs, generate_suite};
use itta_core::nn::{extractor_forward, Network, NormMode};
use itta_core::train::{train_step, TrainConfig, TrainState};
use itta_core::{Graph, Tensor};

fn batch(n: usize) -> (Tensor, Vec<usize>) {
    let suite = generate_suite(4, &default_domain_specs(), 0).unwrap();
    let d = suite.domain("d0").unwrap();
    d.batch(&(0..n).collect::<Vec<_>>())
}

fn forward(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let net = Network::init(&cfg.arch, 0);
    let (x, _) = batch(cfg.batch_size);
    c.bench_function("extractor_forward_b32", |b| {
        b.iter(|| {
            let g = Graph::new();
            let bound = net.bind(&g, |_| false);
            extractor_forward(g.constant(x.clone()), &bound, NormMode::Running, None)
                .unwrap()
                .z
                .value()
        })
    });
}

fn train(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_b32");
    let (x, y) = batch(32);
    for (name, learn_w) in [("joint_and_align", true), ("joint_only", false)] {
        let cfg = TrainConfig {
            learn_w,
            ..TrainConfig::default()
        };
        let state = TrainState::new(&cfg);
        group.bench_function(name, |b| {
            b.iter_batched(
                || state.clone(),
                |mut s| train_step(&mut s, &x, &y, &cfg).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn adapt(c: &mut Criterion) {
    let mut group = c.benchmark_group("adapt_batch_b32");
    let (x, y) = batch(32);
    let cfg = TrainConfig::default();
    let mut trained = TrainState::new(&cfg);
    for _ in 0..5 {
        train_step(&mut trained, &x, &y, &cfg).unwrap();
    }
    for steps in [1, 3] {
        let acfg = AdaptConfig {
            ttt_steps: steps,
            ..AdaptConfig::default()
        };
        let state = AdaptState::new(&trained.net, &acfg).unwrap();
        group.bench_function(format!("ttt_steps_{steps}"), |b| {
            b.iter_batched(
                || state.clone(),
                |mut s| s.adapt_and_predict(&x).unwrap().predictions,
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, forward, train, adapt);
criterion_main!(benches);
