mod common;

use common::toy_data;
use medcl_core::evalkit::AblationRow;
use medcl_core::losses::LossWeights;
use medcl_core::par::Exec;
use medcl_core::segnet::Checkpoint;
use medcl_core::trainer::{loss_and_grad, next_batch, train_from, train_step, TrainConfig, TrainError, TrainState};

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.input_size = Some(16);
    cfg.model.base_width = 4;
    cfg.model.depth = 2;
    cfg.trainer.batch_size = 4;
    cfg.trainer.epochs = 2;
    cfg.trainer.steps_per_epoch = Some(3);
    cfg.trainer.exec = Exec::Sequential;
    cfg.sinkhorn.prototypes = 4;
    cfg
}

#[test]
fn zero_scribble_sources_means_no_supervision() {
    let mut cfg = tiny_config();
    cfg.trainer.scribble_sources = Some(0);
    let data = toy_data(2, 32, 3, 0, 1);
    let state = TrainState::init(&cfg, 2, 32).unwrap();
    let batch = next_batch(&cfg, &state, &data.train).unwrap();
    assert!(batch.items.iter().all(|i| !i.has_scribbles()));
    let out = loss_and_grad(&state.params, &state.prototypes, &state.schedule, &batch, &cfg, None).unwrap();
    assert!(out.no_supervision);
    assert_eq!(out.breakdown.l_scribble, 0.0);
    assert!(out.breakdown.l_category > 0.0);
}

#[test]
fn batches_are_reproducible_and_paired() {
    let cfg = tiny_config();
    let data = toy_data(3, 32, 4, 0, 2);
    let state = TrainState::init(&cfg, 3, 32).unwrap();
    let a = next_batch(&cfg, &state, &data.train).unwrap();
    let b = next_batch(&cfg, &state, &data.train).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.items.len(), 4);
    assert_eq!(a.pairs.len(), 2);
    assert_eq!((a.pairs[1].first, a.pairs[1].second), (2, 3));

    let mut other = cfg.clone();
    other.trainer.seed = 1;
    let c = next_batch(&other, &TrainState::init(&other, 3, 32).unwrap(), &data.train).unwrap();
    assert_ne!(a.items[0].crop, c.items[0].crop);
}

#[test]
fn parallel_and_sequential_batches_agree() {
    let cfg = tiny_config();
    let mut par = cfg.clone();
    par.trainer.exec = Exec::Parallel;
    let data = toy_data(2, 32, 3, 0, 3);
    let state = TrainState::init(&cfg, 2, 32).unwrap();
    assert_eq!(
        next_batch(&cfg, &state, &data.train).unwrap(),
        next_batch(&par, &state, &data.train).unwrap()
    );
    let a = loss_and_grad(
        &state.params,
        &state.prototypes,
        &state.schedule,
        &next_batch(&cfg, &state, &data.train).unwrap(),
        &cfg,
        None,
    )
    .unwrap();
    let b = loss_and_grad(
        &state.params,
        &state.prototypes,
        &state.schedule,
        &next_batch(&par, &state, &data.train).unwrap(),
        &par,
        None,
    )
    .unwrap();
    assert_eq!(a.breakdown, b.breakdown);
    assert_eq!(a.grad_params, b.grad_params);
}

#[test]
fn all_terms_off_leaves_parameters_unchanged() {
    let mut cfg = tiny_config();
    cfg.losses.weights = LossWeights::uniform(0.0);
    let data = toy_data(2, 32, 2, 0, 4);
    let mut state = TrainState::init(&cfg, 2, 32).unwrap();
    let before = state.clone();
    let batch = next_batch(&cfg, &state, &data.train).unwrap();
    let out = train_step(&mut state, &batch, &cfg).unwrap();
    assert_eq!(out.breakdown.total, 0.0);
    assert_eq!(state.params, before.params);
    assert_eq!(state.prototypes, before.prototypes);
    assert_eq!(state.global_step, 1);
}

#[test]
fn repeated_steps_on_one_batch_reduce_the_loss() {
    let mut cfg = tiny_config();
    cfg.trainer.optimizer.lr = 1e-3;
    let data = toy_data(2, 16, 2, 0, 5);
    let mut state = TrainState::init(&cfg, 2, 16).unwrap();
    let batch = next_batch(&cfg, &state, &data.train).unwrap();
    let first = train_step(&mut state, &batch, &cfg).unwrap().breakdown.total;
    let mut last = first;
    for _ in 1..50 {
        last = train_step(&mut state, &batch, &cfg).unwrap().breakdown.total;
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn prototypes_stay_unit_norm() {
    let cfg = tiny_config();
    let data = toy_data(2, 32, 2, 0, 6);
    let out = train_from(&cfg, &data, None, None, None).unwrap();
    let p = &out.state.prototypes;
    for k in 0..p.count() {
        assert!((p.column_norm(k) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn identical_runs_produce_identical_logs() {
    let cfg = tiny_config();
    let data = toy_data(2, 32, 3, 2, 7);
    let a = train_from(&cfg, &data, None, None, None).unwrap();
    let b = train_from(&cfg, &data, None, None, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.steps.len(), 6);
    assert_eq!(a.log.epochs.len(), 2);
    assert!(a.log.epochs.iter().all(|e| e.val_dice.is_some()));
    assert_eq!(a.state, b.state);
    let steps: Vec<u64> = a.log.steps.iter().map(|s| s.global_step).collect();
    assert_eq!(steps, (1..=6).collect::<Vec<_>>());
}

#[test]
fn resume_matches_uninterrupted_training() {
    let mut cfg = tiny_config();
    cfg.trainer.epochs = 3;
    let data = toy_data(2, 32, 3, 0, 8);
    let full = train_from(&cfg, &data, None, None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let head = train_from(&cfg, &data, None, Some(dir.path()), Some(4)).unwrap();
    assert_eq!(head.log.steps.len(), 4);
    let restored = TrainState::load(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(restored, head.state);
    let tail = train_from(&cfg, &data, Some(restored), None, None).unwrap();

    let joined: Vec<_> = head.log.steps.iter().chain(&tail.log.steps).cloned().collect();
    assert_eq!(joined, full.log.steps);
    assert_eq!(tail.state, full.state);
}

#[test]
fn zero_epochs_writes_the_initial_state() {
    let mut cfg = tiny_config();
    cfg.trainer.epochs = 0;
    let data = toy_data(2, 32, 2, 0, 9);
    let dir = tempfile::tempdir().unwrap();
    let out = train_from(&cfg, &data, None, Some(dir.path()), None).unwrap();
    assert!(out.log.steps.is_empty() && out.log.epochs.is_empty());
    let init = TrainState::init(&cfg, 2, 32).unwrap();
    assert_eq!(TrainState::load(&dir.path().join("last.ckpt")).unwrap(), init);
    assert_eq!(
        Checkpoint::load(&dir.path().join("best.ckpt"))
            .unwrap()
            .params()
            .unwrap(),
        init.params
    );
    assert!(dir.path().join("train_log.json").exists());
}

#[test]
fn ablation_rows_only_change_which_terms_are_active() {
    let base = tiny_config();
    let data = toy_data(3, 32, 2, 0, 10);
    let state = TrainState::init(&base, 3, 32).unwrap();
    let batch = next_batch(&base, &state, &data.train).unwrap();
    let full = loss_and_grad(&state.params, &state.prototypes, &state.schedule, &batch, &base, None).unwrap();
    for row in AblationRow::ALL {
        let mut cfg = base.clone();
        cfg.losses.weights = row.weights(base.losses.weights);
        let out = loss_and_grad(&state.params, &state.prototypes, &state.schedule, &batch, &cfg, None).unwrap();
        let weights = cfg.losses.weights.as_array();
        for ((value, reference), w) in out
            .breakdown
            .terms()
            .as_array()
            .iter()
            .zip(full.breakdown.terms().as_array())
            .zip(weights)
        {
            if w == 0.0 {
                assert_eq!(*value, 0.0, "{row}");
            } else {
                assert_eq!(*value, reference, "{row}");
            }
        }
    }
    let r1 = AblationRow::R1.weights(LossWeights::default());
    assert!(!r1.any_unsupervised());
    let r2 = AblationRow::R2.weights(LossWeights::default());
    assert_eq!((r2.cluster, r2.ac, r2.map), (0.0, 0.0, 0.0));
}

#[test]
fn invalid_configs_are_rejected() {
    let data = toy_data(2, 32, 2, 0, 11);
    let mut cfg = tiny_config();
    cfg.trainer.optimizer.lr = 0.0;
    assert!(matches!(
        train_from(&cfg, &data, None, None, None),
        Err(TrainError::Config(_))
    ));
    let mut cfg = tiny_config();
    cfg.trainer.batch_size = 1;
    assert!(matches!(
        train_from(&cfg, &data, None, None, None),
        Err(TrainError::Config(_))
    ));

    let state = TrainState::init(&tiny_config(), 3, 32).unwrap();
    assert!(matches!(
        train_from(&tiny_config(), &data, Some(state), None, None),
        Err(TrainError::ClassMismatch {
            checkpoint: 3,
            dataset: 2
        })
    ));
}

#[test]
fn config_rejects_unknown_keys_and_round_trips() {
    let cfg = tiny_config();
    let json = serde_json::to_string(&cfg).unwrap();
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let partial: TrainConfig = serde_json::from_str(r#"{"trainer": {"epochs": 3}}"#).unwrap();
    assert_eq!(partial.trainer.epochs, 3);
    assert_eq!(partial.trainer.optimizer.lr, 1e-4);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"trainer": {"epoch": 3}}"#).is_err());
}
