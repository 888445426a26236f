//! Training-engine behavior on synthetic data: backend gating, learning
//! progress, freeze semantics, and bit-level determinism.

use std::path::Path;

use ppsam_core::data::{carve_validation, load_manifest, DatasetManifest, FewShotSpec};
use ppsam_core::error::{SegmenterError, TrainError};
use ppsam_core::finetune::{train, FreezePolicy, RunConfig};
use ppsam_core::geometry::PerturbationPolicy;
use ppsam_core::segmenter::{build_model, GroupId, SegmenterSpec};
use ppsam_core::sweep::freeze_ablation_policies;
use ppsam_core::synthetic::{rectangle_spec, write_shape_dataset, ShapeDatasetSpec};

fn rect_dataset(root: &Path, name: &str, count: usize, side: u32, seed: u64) -> DatasetManifest {
    write_shape_dataset(root, name, &rectangle_spec(count, side), seed).unwrap();
    load_manifest(root, name).unwrap()
}

fn quick_config(resolution: u32, epochs: usize) -> RunConfig {
    RunConfig {
        fewshot: FewShotSpec::full(0),
        train_perturbation: PerturbationPolicy::None,
        learning_rate: 3e-3,
        epochs,
        input_resolution: resolution,
        selection_perturbation: 0,
        ..RunConfig::default()
    }
}

#[test]
fn oracle_backend_cannot_train() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = rect_dataset(tmp.path(), "rects", 4, 32, 1);
    let (validation, pool) = carve_validation(&manifest, 0.25, 0).unwrap();
    let mut model = build_model(&SegmenterSpec::oracle(32)).unwrap();
    let result = train(&mut model, &pool, &validation, &quick_config(32, 1));
    assert!(matches!(
        result,
        Err(TrainError::Segmenter(SegmenterError::UnsupportedBackend { .. }))
    ));
}

#[test]
fn validation_dice_improves_over_five_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = rect_dataset(tmp.path(), "rects", 20, 32, 7);
    let (validation, pool) = carve_validation(&manifest, 0.2, 0).unwrap();
    let mut model = build_model(&SegmenterSpec::surrogate(32, 5)).unwrap();
    let outcome = train(&mut model, &pool, &validation, &quick_config(32, 5)).unwrap();
    let first = outcome.log.epochs.first().unwrap().val_dice;
    let last = outcome.log.epochs.last().unwrap().val_dice;
    assert!(
        last > first,
        "validation DICE should improve: first {first:.2}, last {last:.2}"
    );
    assert_eq!(outcome.log.epochs.len(), 5);
    // The retained checkpoint dominates every logged epoch.
    let max_logged = outcome.log.best_val_dice();
    assert!(outcome.best_val_dice >= max_logged);
}

#[test]
fn identical_seeds_give_bitwise_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = rect_dataset(tmp.path(), "rects", 8, 32, 3);
    let (validation, pool) = carve_validation(&manifest, 0.25, 0).unwrap();
    let config = RunConfig {
        train_perturbation: PerturbationPolicy::Variable { max_pixels: 8 },
        epochs: 3,
        ..quick_config(32, 3)
    };
    let run = || {
        let mut model = build_model(&SegmenterSpec::surrogate(32, 5)).unwrap();
        train(&mut model, &pool, &validation, &config).unwrap().log
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "same config and seeds must reproduce the exact log");
}

#[test]
fn zero_magnitude_variable_equals_no_perturbation() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = rect_dataset(tmp.path(), "rects", 6, 32, 13);
    let (validation, pool) = carve_validation(&manifest, 0.25, 0).unwrap();
    let run = |policy: PerturbationPolicy| {
        let config = RunConfig {
            train_perturbation: policy,
            epochs: 2,
            ..quick_config(32, 2)
        };
        let mut model = build_model(&SegmenterSpec::surrogate(32, 9)).unwrap();
        train(&mut model, &pool, &validation, &config).unwrap().log
    };
    let none = run(PerturbationPolicy::None);
    let zero_variable = run(PerturbationPolicy::Variable { max_pixels: 0 });
    assert_eq!(
        none, zero_variable,
        "variable(0) must train on exactly the tight boxes"
    );
}

#[test]
fn freeze_configurations_pin_their_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = rect_dataset(tmp.path(), "rects", 5, 32, 17);
    let (validation, pool) = carve_validation(&manifest, 0.2, 0).unwrap();

    for policy in freeze_ablation_policies() {
        let config = RunConfig {
            freeze: policy,
            epochs: 1,
            ..quick_config(32, 1)
        };
        let mut model = build_model(&SegmenterSpec::surrogate(32, 23)).unwrap();
        let before: Vec<(GroupId, Vec<f64>)> = {
            let ppsam_core::segmenter::Model::Surrogate(net) = &model else {
                unreachable!()
            };
            GroupId::ALL
                .iter()
                .map(|&g| (g, net.group_weights(g)))
                .collect()
        };
        train(&mut model, &pool, &validation, &config).unwrap();
        let ppsam_core::segmenter::Model::Surrogate(net) = &model else {
            unreachable!()
        };
        for (group, weights) in before {
            if policy.trainable(group) {
                assert_ne!(
                    net.group_weights(group),
                    weights,
                    "{group:?} should train under {policy:?}"
                );
            } else {
                assert_eq!(
                    net.group_weights(group),
                    weights,
                    "{group:?} must stay bitwise frozen under {policy:?}"
                );
            }
        }
    }
}

#[test]
fn all_frozen_policy_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = rect_dataset(tmp.path(), "rects", 4, 32, 19);
    let (validation, pool) = carve_validation(&manifest, 0.25, 0).unwrap();
    let config = RunConfig {
        freeze: FreezePolicy {
            image_encoder_trainable: false,
            prompt_encoder_trainable: false,
            mask_decoder_trainable: false,
        },
        ..quick_config(32, 1)
    };
    let mut model = build_model(&SegmenterSpec::surrogate(32, 1)).unwrap();
    assert!(matches!(
        train(&mut model, &pool, &validation, &config),
        Err(TrainError::AllFrozen)
    ));
}

#[test]
fn run_config_rejects_unknown_keys_and_bad_values() {
    let mut value = serde_json::to_value(RunConfig::default()).unwrap();
    value["mystery_knob"] = serde_json::json!(3);
    let parsed: Result<RunConfig, _> = serde_json::from_value(value);
    let message = parsed.unwrap_err().to_string();
    assert!(message.contains("mystery_knob"), "got: {message}");

    let config = RunConfig {
        epochs: 0,
        ..RunConfig::default()
    };
    match config.validate() {
        Err(TrainError::InvalidConfig { field, .. }) => assert_eq!(field, "epochs"),
        other => panic!("expected epochs validation error, got {other:?}"),
    }

    let config = RunConfig {
        learning_rate: 0.0,
        ..RunConfig::default()
    };
    assert!(matches!(
        config.validate(),
        Err(TrainError::InvalidConfig { field: "learning_rate", .. })
    ));
}

#[test]
fn run_config_round_trips_through_flat_json() {
    let config = RunConfig {
        fewshot: FewShotSpec::shots(5, 11).unwrap(),
        train_perturbation: PerturbationPolicy::Variable { max_pixels: 50 },
        ..RunConfig::default()
    };
    let json = serde_json::to_string(&config).unwrap();
    let back: RunConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, config);
}

#[test]
fn training_log_csv_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = rect_dataset(tmp.path(), "rects", 5, 32, 29);
    let (validation, pool) = carve_validation(&manifest, 0.2, 0).unwrap();
    let mut model = build_model(&SegmenterSpec::surrogate(32, 31)).unwrap();
    let outcome = train(&mut model, &pool, &validation, &quick_config(32, 2)).unwrap();
    let path = tmp.path().join("log.csv");
    outcome.log.write_csv(&path).unwrap();
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("epoch,mean_loss,val_dice,is_best"));
    let back = ppsam_core::finetune::TrainingLog::read_csv(&path).unwrap();
    assert_eq!(back, outcome.log);
}

#[test]
fn batch_training_accumulates_and_still_learns() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = ShapeDatasetSpec {
        count: 12,
        image_size: 32,
        distractors: 0,
        noise: 10,
        primary_side: (8, 16),
        ..ShapeDatasetSpec::default()
    };
    write_shape_dataset(tmp.path(), "batched", &spec, 37).unwrap();
    let manifest = load_manifest(tmp.path(), "batched").unwrap();
    let (validation, pool) = carve_validation(&manifest, 0.2, 0).unwrap();
    let config = RunConfig {
        batch_size: 4,
        epochs: 4,
        ..quick_config(32, 4)
    };
    let mut model = build_model(&SegmenterSpec::surrogate(32, 41)).unwrap();
    let outcome = train(&mut model, &pool, &validation, &config).unwrap();
    assert!(outcome.log.epochs.last().unwrap().val_dice > outcome.log.epochs[0].val_dice - 1e-9);
}
