mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;

use common::*;
use lesionlab::error::Error;
use lesionlab::modelkit::{build_model, DigestScope, Regime};
use lesionlab::pipeline::AugmentSpec;
use lesionlab::splits::make_splits;
use lesionlab::trainer::{train_fold, AuditingStore, DiskStore, Loader};

#[test]
fn zero_learning_rate_changes_no_weights() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(dir.path(), 6, 3, &small_params(0.6, 0.1, 2));
    let plan = make_splits(&m, rare(), 2, 1).unwrap();
    let fold = &plan.folds[0];
    let spec = compact18();
    let ck = random_checkpoint(spec, 1);
    for regime in Regime::ALL {
        let mut model = build_model(spec, regime, 0.2, 4, Some(&ck)).unwrap();
        let before = model.digest(DigestScope::All);
        let cfg = train_cfg(0.0, 2, fold_weights(&m, fold));
        let mut loader = Loader::new(DiskStore::new(), regime.backbone_frozen());
        let h = train_fold(&mut model, &m, fold, &cfg, &small_preprocess(), &AugmentSpec::default(), &mut loader)
            .unwrap();
        assert_eq!(model.digest(DigestScope::All), before, "{regime}");
        assert_eq!(h.epoch_losses.len(), 2);
        assert_eq!(h.backbone_digest, model.digest(DigestScope::Backbone));
    }
}

#[test]
fn frozen_backbone_keeps_weights_and_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(dir.path(), 6, 3, &small_params(0.6, 0.1, 2));
    let plan = make_splits(&m, rare(), 2, 1).unwrap();
    let fold = &plan.folds[1];
    let spec = compact18();
    let ck = random_checkpoint(spec, 1);
    let mut model = build_model(spec, Regime::RetrainClassifier, 0.2, 4, Some(&ck)).unwrap();
    let (weights, state, head) = (
        model.digest(DigestScope::Backbone),
        model.state_digest(DigestScope::Backbone),
        model.digest(DigestScope::Head),
    );
    let cfg = train_cfg(1e-3, 3, fold_weights(&m, fold));
    let mut loader = Loader::new(DiskStore::new(), true);
    train_fold(&mut model, &m, fold, &cfg, &small_preprocess(), &AugmentSpec::default(), &mut loader).unwrap();
    assert_eq!(model.digest(DigestScope::Backbone), weights);
    assert_eq!(model.state_digest(DigestScope::Backbone), state);
    assert_ne!(model.digest(DigestScope::Head), head);
}

#[test]
fn trainable_backbones_move_after_one_step() {
    let dir = tempfile::tempdir().unwrap();
    // one fold with exactly five training images: a single optimizer step
    let m = small_phantom(dir.path(), 4, 3, &small_params(0.6, 0.1, 1));
    let plan = make_splits(&m, rare(), 1, 1).unwrap();
    let fold = &plan.folds[0];
    assert_eq!(fold.train.len(), 5);
    let spec = compact18();
    let ck = random_checkpoint(spec, 1);
    for regime in [Regime::Scratch, Regime::FineTune] {
        let mut model = build_model(spec, regime, 0.2, 4, Some(&ck)).unwrap();
        let before = model.digest(DigestScope::Backbone);
        let cfg = train_cfg(1e-3, 1, fold_weights(&m, fold));
        let mut loader = Loader::new(DiskStore::new(), false);
        let h = train_fold(&mut model, &m, fold, &cfg, &small_preprocess(), &AugmentSpec::default(), &mut loader)
            .unwrap();
        assert_eq!(h.steps, 1);
        assert_ne!(model.digest(DigestScope::Backbone), before, "{regime}");
    }
}

#[test]
fn head_only_training_lowers_the_loss_on_easy_images() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(dir.path(), 4, 2, &small_params(0.9, 0.0, 2));
    let plan = make_splits(&m, rare(), 1, 1).unwrap();
    let fold = &plan.folds[0];
    let n_images: usize = fold.train.iter().map(|id| m.lesion(id).unwrap().images.len()).sum();
    assert_eq!(n_images, 8);
    let spec = compact18();
    let ck = quick_pretrained(spec);
    let mut model = build_model(spec, Regime::RetrainClassifier, 0.2, 4, Some(&ck)).unwrap();
    // 60 steps at the default 1e-5 barely move the head; a larger step and
    // no augmentation keep this a statement about the loop, not the schedule
    let cfg = train_cfg(1e-3, 30, fold_weights(&m, fold));
    let mut loader = Loader::new(DiskStore::new(), true);
    let h = train_fold(&mut model, &m, fold, &cfg, &small_preprocess(), &AugmentSpec::disabled(), &mut loader)
        .unwrap();
    assert_eq!(h.epoch_losses.len(), 30);
    assert!(
        h.epoch_losses[29] < h.epoch_losses[0],
        "{:?}",
        h.epoch_losses
    );
}

#[test]
fn identical_seeds_give_identical_histories() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(dir.path(), 6, 3, &small_params(0.6, 0.1, 2));
    let plan = make_splits(&m, rare(), 2, 1).unwrap();
    let fold = &plan.folds[0];
    let spec = compact18();
    let run = |regime: Regime| {
        let mut model = build_model(spec, regime, 0.2, 4, Some(&random_checkpoint(spec, 1))).unwrap();
        let cfg = train_cfg(1e-3, 2, fold_weights(&m, fold));
        let mut loader = Loader::new(DiskStore::new(), regime.backbone_frozen());
        train_fold(&mut model, &m, fold, &cfg, &small_preprocess(), &AugmentSpec::default(), &mut loader).unwrap()
    };
    for regime in [Regime::FineTune, Regime::RetrainClassifier] {
        assert_eq!(run(regime), run(regime));
    }
}

#[test]
fn validation_images_are_never_read() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(dir.path(), 8, 3, &small_params(0.6, 0.1, 2));
    let plan = make_splits(&m, rare(), 3, 1).unwrap();
    let spec = compact18();
    let ck = random_checkpoint(spec, 1);
    for fold in &plan.folds {
        let validation: BTreeSet<PathBuf> = fold
            .validation_ids()
            .flat_map(|id| m.lesion(id).unwrap().images.iter().map(|i| m.resolve(i)))
            .collect();
        for regime in [Regime::Scratch, Regime::RetrainClassifier] {
            let mut model = build_model(spec, regime, 0.2, 4, Some(&ck)).unwrap();
            let cfg = train_cfg(1e-3, 2, fold_weights(&m, fold));
            let mut loader = Loader::new(AuditingStore::new(DiskStore::new()), regime.backbone_frozen());
            train_fold(&mut model, &m, fold, &cfg, &small_preprocess(), &AugmentSpec::default(), &mut loader)
                .unwrap();
            let reads = loader.store.reads();
            assert!(!reads.is_empty());
            assert!(reads.iter().all(|p| !validation.contains(p)), "fold {} read a validation image", fold.fold_index);
        }
    }
}

#[test]
fn non_finite_loss_names_epoch_step_and_lesions() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(dir.path(), 6, 3, &small_params(0.6, 0.1, 1));
    let plan = make_splits(&m, rare(), 2, 1).unwrap();
    let fold = &plan.folds[0];
    let mut model = build_model(compact18(), Regime::Scratch, 0.0, 4, None).unwrap();
    for p in model.head_params_mut() {
        p.value[0] = f32::NAN;
    }
    let cfg = train_cfg(1e-3, 1, fold_weights(&m, fold));
    let mut loader = Loader::new(DiskStore::new(), false);
    let err = train_fold(&mut model, &m, fold, &cfg, &small_preprocess(), &AugmentSpec::default(), &mut loader)
        .unwrap_err();
    match err {
        Error::NonFiniteLoss { epoch, step, lesion_ids } => {
            assert_eq!((epoch, step), (0, 0));
            assert!(!lesion_ids.is_empty());
            assert!(lesion_ids.iter().all(|id| fold.train.contains(id)));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn empty_training_set_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_phantom(dir.path(), 3, 2, &small_params(0.6, 0.1, 1));
    let plan = make_splits(&m, rare(), 1, 1).unwrap();
    let mut fold = plan.folds[0].clone();
    fold.train.clear();
    let mut model = build_model(compact18(), Regime::Scratch, 0.2, 4, None).unwrap();
    let cfg = train_cfg(1e-3, 1, [0.5, 0.5]);
    let mut loader = Loader::new(DiskStore::new(), false);
    let err = train_fold(&mut model, &m, &fold, &cfg, &small_preprocess(), &AugmentSpec::default(), &mut loader)
        .unwrap_err();
    assert!(err.to_string().contains("empty training set"), "{err}");
}
