use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vqa_core::data::{make_synthetic, SyntheticData, SyntheticSpec};
use vqa_core::harness::train::{CHECKPOINT_FILE, METRICS_FILE, RECORD_FILE};
use vqa_core::harness::{evaluate, train, RunRecord, TrainConfig, TrainInputs};
use vqa_core::model::VqaModel;
use vqa_core::Error;

fn small(data: &SyntheticData, seed: u64, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        epochs,
        batch_size: 16,
        ..Default::default()
    };
    cfg.model.answers = data.answers.len();
    cfg.model.hidden = 16;
    cfg.model.fusion_width = 24;
    cfg.model.classifier_width = 24;
    cfg.model.attention.width = 16;
    cfg
}

#[test]
fn runs_are_reproducible_byte_for_byte() {
    let data = make_synthetic(&SyntheticSpec::single(2, 150)).unwrap();
    let inputs = TrainInputs::from_synthetic(&data);
    let cfg = small(&data, 11, 6);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let records: Vec<_> = dirs
        .iter()
        .map(|d| train(&cfg, &inputs, Some(d.path())).unwrap().record)
        .collect();
    for file in [METRICS_FILE, CHECKPOINT_FILE] {
        let a = fs::read(dirs[0].path().join(file)).unwrap();
        let b = fs::read(dirs[1].path().join(file)).unwrap();
        assert!(a == b, "{file} differs between identical runs");
    }
    assert_eq!(records[0].epochs, records[1].epochs);

    let other = tempfile::tempdir().unwrap();
    train(&small(&data, 12, 6), &inputs, Some(other.path())).unwrap();
    assert_ne!(
        fs::read(dirs[0].path().join(CHECKPOINT_FILE)).unwrap(),
        fs::read(other.path().join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn saved_checkpoint_reproduces_the_recorded_best() {
    let data = make_synthetic(&SyntheticSpec::single(5, 200)).unwrap();
    let inputs = TrainInputs::from_synthetic(&data);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&data, 5, 12);
    let outcome = train(&cfg, &inputs, Some(dir.path())).unwrap();

    let model = VqaModel::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(model, outcome.model);
    let report = evaluate(&model, &data.val, &data.features, 33).unwrap();
    assert!((report.accuracy - outcome.record.best_val_acc).abs() <= 1e-12);

    let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,train_acc,val_acc"));
    assert_eq!(lines.count(), outcome.record.epochs.len());

    let text = fs::read_to_string(dir.path().join(RECORD_FILE)).unwrap();
    let record: RunRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(record.best_epoch, outcome.record.best_epoch);
    assert_eq!(record.best_val_acc.to_bits(), outcome.record.best_val_acc.to_bits());
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let data = make_synthetic(&SyntheticSpec::single(6, 60)).unwrap();
    let inputs = TrainInputs::from_synthetic(&data);
    let mut cfg = small(&data, 6, 4);
    cfg.optimizer.lr = 0.0;
    let outcome = train(&cfg, &inputs, None).unwrap();
    let initial = VqaModel::new(
        cfg.model.clone(),
        data.vocab.clone(),
        &data.table,
        data.answers.answers().to_vec(),
        &mut ChaCha8Rng::seed_from_u64(cfg.seed),
    )
    .unwrap();
    assert_eq!(outcome.model.params, initial.params);
    let accs: Vec<_> = outcome.record.epochs.iter().map(|m| m.val_acc).collect();
    assert!(accs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn early_stopping_respects_patience() {
    let data = make_synthetic(&SyntheticSpec::single(6, 60)).unwrap();
    let inputs = TrainInputs::from_synthetic(&data);
    let mut cfg = small(&data, 6, 50);
    cfg.optimizer.lr = 0.0;
    cfg.patience = 3;
    let dir = tempfile::tempdir().unwrap();
    let record = train(&cfg, &inputs, Some(dir.path())).unwrap().record;
    assert!(record.stopped_early);
    assert_eq!(record.best_epoch, 1);
    assert_eq!(record.epochs.len(), 4);
    let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 5);
}

#[test]
fn dimension_mismatch_fails_before_any_training() {
    let data = make_synthetic(&SyntheticSpec::single(1, 40)).unwrap();
    let inputs = TrainInputs::from_synthetic(&data);
    let mut cfg = small(&data, 1, 3);
    cfg.model.feature_dim += 1;
    let dir = tempfile::tempdir().unwrap();
    let err = train(&cfg, &inputs, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Data(_) | Error::Dimension { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(!dir.path().join(METRICS_FILE).exists());
}

#[test]
fn training_without_validation_selects_on_training_accuracy() {
    let mut data = make_synthetic(&SyntheticSpec::single(8, 80)).unwrap();
    data.val.clear();
    let inputs = TrainInputs::from_synthetic(&data);
    let record = train(&small(&data, 8, 5), &inputs, None).unwrap().record;
    assert!(record.epochs.iter().all(|m| m.val_acc.is_none()));
    let best = record.epochs.iter().map(|m| m.train_acc).fold(f64::MIN, f64::max);
    assert_eq!(record.best_val_acc, best);
}
