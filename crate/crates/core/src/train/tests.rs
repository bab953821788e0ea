use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_suite, DomainSpec};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        arch: Arch {
            input_dim: 16,
            width: 8,
            blocks: 2,
            classes: 3,
            fw_layers: 3,
            norm: true,
        },
        batch_size: 8,
        lr_w: 0.05,
        ..TrainConfig::default()
    }
}

fn batch(seed: u64, rows: usize, dim: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::matrix(
        rows,
        dim,
        (0..rows * dim)
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
    )
    .unwrap();
    let y = (0..rows).map(|i| i % classes).collect();
    (x, y)
}

fn hashes(net: &Network) -> [String; 3] {
    [
        net.group_hash(Group::Extractor),
        net.group_hash(Group::Classifier),
        net.group_hash(Group::WeightNet),
    ]
}

#[test]
fn phases_touch_only_their_groups() {
    let cfg = small_cfg();
    let mut state = TrainState::new(&cfg);
    let (x, y) = batch(1, 8, 16, 3);
    let before = hashes(&state.net);

    let (_, grads, _, _) = joint_gradients(&state.net, &x, &y, &cfg, &mut state.augmenter).unwrap();
    assert!(grads
        .iter()
        .all(|(k, _)| matches!(k.group, Group::Extractor | Group::Classifier)));
    state.net.sgd_update(&grads, cfg.lr_model).unwrap();
    let mid = hashes(&state.net);
    assert_ne!(mid[0], before[0]);
    assert_ne!(mid[1], before[1]);
    assert_eq!(mid[2], before[2]);

    let (res, _, _) = align_gradients(&state.net, &x, &y, &cfg, &mut state.augmenter);
    let (_, wgrads) = res.unwrap();
    assert!(wgrads.iter().all(|(k, _)| k.group == Group::WeightNet));
    state.net.sgd_update(&wgrads, cfg.lr_w).unwrap();
    let after = hashes(&state.net);
    assert_eq!(after[0], mid[0]);
    assert_eq!(after[1], mid[1]);
    assert_ne!(after[2], mid[2]);
}

#[test]
fn step_costs_two_forwards_and_four_backwards() {
    let cfg = small_cfg();
    let mut state = TrainState::new(&cfg);
    let (x, y) = batch(2, 8, 16, 3);
    for _ in 0..3 {
        let r = train_step(&mut state, &x, &y, &cfg).unwrap();
        assert_eq!((r.forward_passes, r.backward_passes), (2, 4));
        assert!(r.l_align.is_some());
    }
    let joint_only = TrainConfig {
        learn_w: false,
        ..small_cfg()
    };
    let r = train_step(&mut state, &x, &y, &joint_only).unwrap();
    assert_eq!((r.forward_passes, r.backward_passes), (1, 1));
}

#[test]
fn zero_model_rate_moves_only_w() {
    let cfg = TrainConfig {
        lr_model: 0.0,
        ..small_cfg()
    };
    let mut state = TrainState::new(&cfg);
    let (x, y) = batch(3, 8, 16, 3);
    let before = hashes(&state.net);
    train_step(&mut state, &x, &y, &cfg).unwrap();
    let after = hashes(&state.net);
    assert_eq!(after[0], before[0]);
    assert_eq!(after[1], before[1]);
    assert_ne!(after[2], before[2]);
}

#[test]
fn degenerate_config_is_an_augmented_cross_entropy_step() {
    let cfg = TrainConfig {
        alpha: 0.0,
        lr_w: 0.0,
        ..small_cfg()
    };
    let mut state = TrainState::new(&cfg);
    let (x, y) = batch(4, 8, 16, 3);

    // replay the same augmentation draw for the oracle step
    let mut aug = state.augmenter.clone();
    let mut expect = state.net.clone();
    let g = Graph::new();
    let grads = {
        let bound = expect.bind(&g, |k| {
            matches!(k.group, Group::Extractor | Group::Classifier)
                && !k.name.starts_with("rotation.")
        });
        let out = extractor_forward(
            g.constant(x.clone()),
            &bound,
            NormMode::Train,
            Some(&mut aug),
        )
        .unwrap();
        let lc = classify(out.z, &bound.classifier)
            .unwrap()
            .softmax_ce(&y)
            .unwrap();
        let la = classify(out.z_aug.unwrap(), &bound.classifier)
            .unwrap()
            .softmax_ce(&y)
            .unwrap();
        let loss = lc.add(la).unwrap();
        let gm = g.grad(loss, &bound.leaf_vars(), false).unwrap();
        collect(&bound.leaves, &gm)
    };
    expect.sgd_update(&grads, cfg.lr_model).unwrap();

    let w_before = state.net.group_hash(Group::WeightNet);
    train_step(&mut state, &x, &y, &cfg).unwrap();
    for ((ka, a), (kb, b)) in state.net.params().iter().zip(expect.params().iter()) {
        assert_eq!(ka, kb);
        if matches!(ka.group, Group::Extractor | Group::Classifier) {
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() < 1e-12, "{ka}");
            }
        }
    }
    assert_eq!(state.net.group_hash(Group::WeightNet), w_before);
}

#[test]
fn backtracking_w_step_decreases_alignment() {
    let cfg = small_cfg();
    let mut state = TrainState::new(&cfg);
    let (x, y) = batch(5, 8, 16, 3);
    // a few warm-up steps so the gradients are not at their initial symmetry
    for _ in 0..5 {
        train_step(&mut state, &x, &y, &cfg).unwrap();
    }
    let aug = state.augmenter.clone();
    let (res, _, _) = align_gradients(&state.net, &x, &y, &cfg, &mut aug.clone());
    let (before, grads) = res.unwrap();
    let mut t = 1.0;
    let mut accepted = None;
    for _ in 0..40 {
        let mut trial = state.net.clone();
        trial.sgd_update(&grads, t).unwrap();
        let (res, _, _) = align_gradients(&trial, &x, &y, &cfg, &mut aug.clone());
        let after = res.unwrap().0;
        let sq: f64 = grads
            .iter()
            .flat_map(|(_, g)| g.data().iter().map(|v| v * v))
            .sum();
        if after <= before - 1e-4 * t * sq {
            accepted = Some(after);
            break;
        }
        t *= 0.5;
    }
    let after = accepted.expect("Armijo step found");
    assert!(after <= before, "{after} > {before}");
}

#[test]
fn vanished_main_gradient_skips_the_w_update() {
    let cfg = small_cfg();
    let mut state = TrainState::new(&cfg);
    state.net.classifier.weight = Tensor::zeros(state.net.classifier.weight.shape());
    let (x, y) = batch(6, 8, 16, 3);
    let w = state.net.group_hash(Group::WeightNet);
    let r = train_step(
        &mut state,
        &x,
        &y,
        &TrainConfig {
            lr_model: 0.0,
            ..cfg
        },
    )
    .unwrap();
    assert!(r.w_skipped);
    assert_eq!(r.l_align, None);
    assert_eq!(state.net.group_hash(Group::WeightNet), w);
}

#[test]
fn non_finite_input_aborts() {
    let cfg = small_cfg();
    let mut state = TrainState::new(&cfg);
    let (mut x, y) = batch(7, 8, 16, 3);
    x.data_mut()[3] = f64::NAN;
    assert!(matches!(
        train_step(&mut state, &x, &y, &cfg),
        Err(Error::NonFinite(_))
    ));
}

fn separable_suite(seed: u64) -> DomainSuite {
    let spec = |id: &str| DomainSpec {
        domain_id: id.into(),
        brightness_shift: 0.0,
        contrast_scale: 0.8,
        noise_std: 0.15,
        texture_freq: 0.0,
        n_samples: 200,
    };
    generate_suite(2, &[spec("a"), spec("b")], seed).unwrap()
}

fn separable_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        arch: Arch {
            classes: 2,
            width: 16,
            blocks: 2,
            fw_layers: 3,
            ..Arch::default()
        },
        steps,
        eval_every: 50,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn fit_without_steps_returns_the_initialization() {
    let suite = separable_suite(0);
    let cfg = separable_cfg(0);
    let res = fit(&suite, &cfg).unwrap();
    let init = Network::init(&cfg.arch, cfg.seed);
    assert_eq!(res.checkpoint, Checkpoint::from_network(&init));
    assert_eq!(res.trace.len(), 1);
    assert_eq!(res.best_step, 0);
    assert_eq!(res.best_val_acc, res.trace[0].val_acc);
}

#[test]
fn fit_learns_a_separable_problem_deterministically() {
    let suite = separable_suite(1);
    let cfg = separable_cfg(500);
    let a = fit(&suite, &cfg).unwrap();
    assert!(a.best_val_acc >= 0.95, "val acc {}", a.best_val_acc);

    let mut running = f64::NEG_INFINITY;
    for r in &a.trace {
        running = running.max(r.val_acc);
    }
    assert_eq!(running, a.best_val_acc);
    let first_best = a
        .trace
        .iter()
        .find(|r| r.val_acc == a.best_val_acc)
        .unwrap();
    assert_eq!(first_best.step, a.best_step);

    let b = fit(&suite, &cfg).unwrap();
    assert_eq!(a.trace.len(), b.trace.len());
    assert!(a.trace.iter().zip(&b.trace).all(|(p, q)| p.same_values(q)));
    assert_eq!(a.checkpoint.hash(), b.checkpoint.hash());
}

#[test]
fn fit_rejects_bad_configs() {
    let suite = separable_suite(2);
    let mut cfg = separable_cfg(1);
    cfg.val_fraction = 0.0;
    assert!(fit(&suite, &cfg).is_err());
    let mut cfg = separable_cfg(1);
    cfg.arch.classes = 3;
    assert!(fit(&suite, &cfg).is_err());
    let mut cfg = separable_cfg(1);
    cfg.augment.apply_at_block = 9;
    assert!(fit(&suite, &cfg).is_err());
}

fn noisy_spec(id: &str, noise: f64, n: usize) -> DomainSpec {
    DomainSpec {
        domain_id: id.into(),
        brightness_shift: 0.1,
        contrast_scale: 0.5,
        noise_std: noise,
        texture_freq: 0.0,
        n_samples: n,
    }
}

#[test]
fn more_target_noise_lowers_erm_accuracy() {
    let noises = [0.2, 0.5, 0.8, 1.1];
    let mut mean_acc = vec![0.0; noises.len()];
    for seed in 0..5 {
        let mut specs = vec![noisy_spec("src", 0.2, 200)];
        specs.extend(
            noises
                .iter()
                .enumerate()
                .map(|(i, &n)| noisy_spec(&format!("t{i}"), n, 300)),
        );
        let suite = generate_suite(4, &specs, seed).unwrap();
        let mut train_view = suite.single_source("src").unwrap();
        train_view.target_ids.clear();
        let mut cfg = crate::harness::builtin_method("erm").unwrap().train;
        cfg.arch = Arch {
            width: 16,
            blocks: 2,
            fw_layers: 2,
            ..Arch::default()
        };
        cfg.steps = 150;
        cfg.eval_every = 50;
        cfg.seed = seed;
        let net = fit(&train_view, &cfg)
            .unwrap()
            .checkpoint
            .to_network()
            .unwrap();
        for (i, acc) in mean_acc.iter_mut().enumerate() {
            let d = suite.domain(&format!("t{i}")).unwrap();
            *acc += crate::adapt::frozen_accuracy(&net, &d.images, &d.labels).unwrap() / 5.0;
        }
    }
    for w in mean_acc.windows(2) {
        assert!(w[1] < w[0], "accuracy by noise level: {mean_acc:?}");
    }
}
