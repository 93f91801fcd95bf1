mod common;

use common::{tiny_config, tiny_dims, tiny_splits};
use moe_health::diffcore::{ParameterStore, Tape};
use moe_health::encoders::{is_encoder_param, ModalityCombination, Sample};
use moe_health::losses::record_objective;
use moe_health::model::MoeHealthModel;
use moe_health::moe::{ExpertPool, Fusion};
use moe_health::trainer::{
    apply_ablation, pretrain_experts, train, train_with_validator, AblationMode, TrainConfig, ValidationScore,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build(splits: &moe_health::data::Splits, config: &TrainConfig) -> (MoeHealthModel, ParameterStore) {
    let pool = ExpertPool::from_samples(&splits.train).unwrap();
    let model = MoeHealthModel::new(apply_ablation(config).model, tiny_dims(), pool);
    let store = model.init(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    (model, store)
}

fn changed(before: &ParameterStore, after: &ParameterStore) -> Vec<String> {
    before
        .iter()
        .zip(after.iter())
        .filter(|(a, b)| a.values != b.values)
        .map(|(a, _)| a.name.clone())
        .collect()
}

#[test]
fn pretraining_updates_only_encoders_and_the_matching_expert() {
    let splits = tiny_splits(300, 3);
    let config = tiny_config();
    let (model, before) = build(&splits, &config);
    let target: ModalityCombination = "ET".parse().unwrap();
    let index = model.pool().index_of(target).expect("ET in pool");
    let only_target: Vec<Sample> = splits
        .train
        .iter()
        .filter(|s| s.combination().unwrap() == target)
        .cloned()
        .collect();
    assert!(!only_target.is_empty());

    let mut store = before.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let records = pretrain_experts(&model, &mut store, &only_target, &config, &mut rng).unwrap();
    assert_eq!(records.len(), model.pool().len());

    let prefix = model.pool().expert_prefix(index);
    let names = changed(&before, &store);
    assert!(names.iter().any(|n| n.starts_with(&prefix)), "target expert untouched");
    for name in &names {
        assert!(
            is_encoder_param(name) || name.starts_with(&prefix),
            "pretraining changed `{name}`"
        );
    }
    assert!(store.iter().filter(|p| p.name.starts_with("gate.")).all(|p| {
        let b = before.by_name(&p.name).unwrap();
        b.values == p.values
    }));
}

#[test]
fn zero_pretraining_epochs_is_the_identity() {
    let splits = tiny_splits(200, 4);
    let config = TrainConfig {
        pretrain_epochs: 0,
        ..tiny_config()
    };
    let (model, before) = build(&splits, &config);
    let mut store = before.clone();
    let records = pretrain_experts(&model, &mut store, &splits.train, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(store, before);
    assert!(records.iter().all(|r| r.first_epoch_loss.is_nan()));
}

#[test]
fn injected_validation_sequence_stops_after_epoch_four_and_keeps_epoch_two() {
    let splits = tiny_splits(200, 5);
    let config = TrainConfig {
        patience: 2,
        max_epochs: 10,
        ..tiny_config()
    };
    let sequence = [0.6, 0.7, 0.65, 0.64, 0.63, 0.62, 0.61];
    let mut digests = Vec::new();
    let outcome = train_with_validator(&splits, tiny_dims(), &config, &mut |epoch, model, store, _| {
        digests.push(store.digest());
        Ok(ValidationScore {
            auroc: Some(sequence[epoch - 1]),
            usage: vec![0; model.pool().len()],
        })
    })
    .unwrap();
    let report = &outcome.report;
    assert_eq!(report.epochs.len(), 4);
    assert!(report.stopped_early);
    assert_eq!(report.best_epoch, Some(2));
    assert_eq!(report.best_val_auroc, Some(0.7));
    assert_eq!(outcome.checkpoint.best_epoch, Some(2));
    assert_eq!(outcome.checkpoint.params.digest(), digests[1]);
    assert_ne!(digests[1], digests[3]);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let splits = tiny_splits(200, 6);
    let config = tiny_config();
    let a = train(&splits, tiny_dims(), &config).unwrap();
    let b = train(&splits, tiny_dims(), &config).unwrap();
    assert_eq!(
        serde_json::to_value(&a.report).unwrap(),
        serde_json::to_value(&b.report).unwrap()
    );
    assert_eq!(a.checkpoint.digest().unwrap(), b.checkpoint.digest().unwrap());

    let c = train(&splits, tiny_dims(), &TrainConfig { seed: 9, ..config }).unwrap();
    assert_ne!(a.checkpoint.digest().unwrap(), c.checkpoint.digest().unwrap());
}

#[test]
fn uniform_fusion_leaves_the_gate_without_gradient() {
    let splits = tiny_splits(120, 7);
    let config = TrainConfig {
        ablation: AblationMode::NoDynamicGating,
        ..tiny_config()
    };
    let wiring = apply_ablation(&config);
    assert_eq!(wiring.fusion, Fusion::Uniform);
    let (model, mut store) = build(&splits, &config);
    let batch: Vec<&Sample> = splits.train.iter().take(16).collect();
    let labels: Vec<f64> = batch.iter().map(|s| f64::from(s.label)).collect();
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &store, &batch, wiring.fusion).unwrap();
    assert!(pass.out.gate.is_none());
    let n = model.pool().len();
    assert!(pass.out.decisions.iter().all(|d| d.selected.len() == n));
    let obj = record_objective(&mut tape, pass.out.pred, &labels, pass.out.gate, &pass.out.decisions, 0.5).unwrap();
    tape.backward(obj.total, &mut store).unwrap();
    for p in store.iter().filter(|p| p.name.starts_with("gate.")) {
        assert!(p.gradient.iter().all(|&g| g == 0.0), "{} has gradient", p.name);
    }
    assert!(store.iter().any(|p| p.gradient.iter().any(|&g| g != 0.0)));
}

#[test]
fn top1_routes_every_sample_to_one_expert() {
    let splits = tiny_splits(120, 8);
    let config = TrainConfig {
        ablation: AblationMode::Top1,
        ..tiny_config()
    };
    let wiring = apply_ablation(&config);
    assert_eq!(wiring.fusion, Fusion::TopK(1));
    let (model, store) = build(&splits, &config);
    let preds = model.predict(&store, &splits.test, wiring.fusion).unwrap();
    assert_eq!(preds.len(), splits.test.len());
    for p in &preds {
        assert_eq!(p.decision.selected.len(), 1);
        assert_eq!(p.decision.weights, vec![1.0]);
    }
}

#[test]
fn every_ablation_trains_end_to_end() {
    let splits = tiny_splits(150, 10);
    for mode in AblationMode::ALL {
        let config = TrainConfig {
            ablation: mode,
            max_epochs: 1,
            ..tiny_config()
        };
        let out = train(&splits, tiny_dims(), &config).unwrap();
        assert_eq!(out.report.ablation, mode);
        assert_eq!(out.report.pretraining.is_empty(), mode == AblationMode::NoSpecialization);
        let missing = out.checkpoint.params.iter().any(|p| p.name.starts_with("missing."));
        assert_eq!(missing, mode != AblationMode::NoMissingIndicator, "{mode}");
    }
}

#[test]
fn empty_splits_are_rejected() {
    let mut splits = tiny_splits(100, 11);
    splits.val.clear();
    let err = train(&splits, tiny_dims(), &tiny_config()).unwrap_err();
    assert!(matches!(err, moe_health::Error::Config(_)), "{err}");
}
