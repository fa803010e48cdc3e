mod oracles;

use augmult::batching::Scheme;
use augmult::models::{LinearClassifier, Network, ParamSet, ResNetConfig, SmallResNet};
use augmult::training::{self, DataSource, ModelSpec, Schedule, TrainConfig};
use augmult::{data::SynthConfig, Exec, RunRecord, RunStatus, Tensor};

fn config(scheme: Scheme, n: usize, size: usize) -> TrainConfig {
    let growing = scheme == Scheme::GROWING;
    TrainConfig {
        scheme,
        n,
        batch_size: (!growing).then_some(size),
        unique_per_batch: growing.then_some(size),
        base_lr: 0.05,
        momentum: 0.9,
        weight_decay: 5e-4,
        schedule: Schedule::Cosine,
        epoch_budget: 2,
        max_steps: None,
        label_smoothing: 0.0,
        dropout_p: 0.0,
        run_seed: 3,
        augment: Default::default(),
        model: ModelSpec { blocks: 1, width: 2 },
        data: DataSource::Synthetic {
            seed: 1,
            config: SynthConfig {
                classes: 3,
                per_class: 10,
                test_per_class: Some(3),
                ..SynthConfig::default()
            },
        },
        record_wall_time: false,
    }
}

fn run(cfg: &TrainConfig) -> (Vec<RunRecord>, ParamSet) {
    let (train, test) = cfg.data.load().unwrap();
    let mut net = SmallResNet::init(cfg.resnet_config(&train), cfg.run_seed).unwrap();
    let mut records = Vec::new();
    training::train(cfg, &mut net, &train, &test, Exec::default(), &mut |r| {
        records.push(r.clone());
        Ok(())
    })
    .unwrap();
    (records, net.params().clone())
}

#[test]
fn momentum_and_decay_follow_the_closed_form() {
    // f(x) = a x^2 / 2 has gradient a x; both cases have real eigenvalues
    for (a, wd, lr, m) in [(1.5, 0.1, 0.02, 0.5), (1.9, 0.1, 0.001, 0.9)] {
        let x0 = 2.0;
        let mut params = ParamSet::new();
        params.push("x", Tensor::from_vec(vec![x0]));
        let mut velocity = params.zeros_like();
        for t in 1..=60u32 {
            let mut g = ParamSet::new();
            g.push("x", Tensor::from_vec(vec![a * params.tensors()[0].data()[0]]));
            training::sgd_step(&mut params, &g, &mut velocity, lr, m, wd).unwrap();
            let (x, v) = oracles::momentum_recurrence_1d(a, wd, lr, m, x0, t);
            assert!(
                (params.tensors()[0].data()[0] - x).abs() < 1e-10,
                "m={m} step {t}"
            );
            assert!(
                (velocity.tensors()[0].data()[0] - v).abs() < 1e-10,
                "m={m} step {t}"
            );
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = config(Scheme::GROWING, 2, 4);
    cfg.base_lr = 0.0;
    let (train, _) = cfg.data.load().unwrap();
    let init = SmallResNet::init(cfg.resnet_config(&train), cfg.run_seed).unwrap();
    let (records, params) = run(&cfg);
    assert_eq!(&params, init.params());
    assert!(records.iter().all(|r| r.temperature == 0.0));
}

#[test]
fn schemes_coincide_at_multiplicity_one() {
    let (growing, pg) = run(&config(Scheme::GROWING, 1, 4));
    let (within, pw) = run(&config(Scheme::FIXED_WITHIN, 1, 4));
    let (neighbouring, pn) = run(&config(Scheme::FIXED_NEIGHBOURING, 1, 4));
    assert_eq!(pg, pw);
    assert_eq!(pg, pn);
    let strip = |rs: &[RunRecord]| -> Vec<(u64, Option<f64>, Option<f64>)> {
        rs.iter()
            .map(|r| (r.step, r.train_loss_raw, r.test_acc))
            .collect()
    };
    assert_eq!(strip(&growing), strip(&within));
    assert_eq!(strip(&growing), strip(&neighbouring));
}

#[test]
fn records_every_epoch_and_ends_final() {
    let mut cfg = config(Scheme::FIXED_NEIGHBOURING, 2, 4);
    cfg.epoch_budget = 3;
    let (records, _) = run(&cfg);
    assert_eq!(records.len(), 3);
    assert!(records[..2].iter().all(|r| r.status == RunStatus::Running));
    assert_eq!(records[2].status, RunStatus::Final);
    // 30 images, U = 4: 7 groups, each served twice per epoch
    assert_eq!(records[2].step, 3 * 14);
    assert_eq!(records[2].dataset_passes, 6.0);
    assert!(records
        .iter()
        .all(|r| r.temperature == r.lr * 2.0 && r.wall_ms == 0));
}

#[test]
fn divergence_is_recorded_not_raised() {
    let mut cfg = config(Scheme::GROWING, 1, 4);
    cfg.base_lr = 1e6;
    cfg.schedule = Schedule::Constant;
    let (records, _) = run(&cfg);
    let last = records.last().unwrap();
    assert_eq!(last.status, RunStatus::Diverged);
    assert_eq!(last.ranking_accuracy(), 0.0);
}

#[test]
fn label_smoothing_zero_matches_default() {
    let cfg = config(Scheme::GROWING, 2, 4);
    let (train, _) = cfg.data.load().unwrap();
    let net = LinearClassifier::zeros(train.dims(), train.classes());
    let batch = &augmult::batching::plan_epoch(cfg.scheme, 2, 4, train.len(), 0, 0)
        .unwrap()
        .batches[0];
    let opts = training::SlotOptions {
        dropout_p: 0.0,
        label_smoothing: 0.0,
    };
    let a = training::batch_gradient(&net, &train, batch, &cfg.augment, opts, Exec::Sequential).unwrap();
    let b = training::batch_gradient(
        &net,
        &train,
        batch,
        &cfg.augment,
        Default::default(),
        Exec::Parallel,
    )
    .unwrap();
    assert_eq!(a, b);
    // zero weights give uniform logits
    assert!((a.0 - (train.classes() as f64).ln()).abs() < 1e-12);
}

#[test]
fn resnet_config_follows_model_spec() {
    let cfg = config(Scheme::GROWING, 1, 4);
    let (train, _) = cfg.data.load().unwrap();
    assert_eq!(
        cfg.resnet_config(&train),
        ResNetConfig::new(1, 2, 3, train.dims())
    );
}
