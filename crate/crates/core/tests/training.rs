//! Training regimes on synthetic data.

use tsrobust::data::{normalize, synth_generate, DatasetBundle};
use tsrobust::model::{Classifier, ConvBlockConfig, ModelConfig};
use tsrobust::trainers::{train, LabelMode, Regime, TrainConfig};

fn bundle(per_class: usize) -> DatasetBundle {
    normalize(&synth_generate(2, per_class, 2, 32, 42)).unwrap()
}

fn model(gnlm: bool) -> Classifier {
    Classifier::build(ModelConfig {
        in_channels: 2,
        num_classes: 2,
        conv_blocks: vec![
            ConvBlockConfig { filters: 8, kernel: 5 },
            ConvBlockConfig { filters: 8, kernel: 5 },
        ],
        use_gnlm: gnlm,
        seed: 7,
    })
    .unwrap()
}

#[test]
fn standard_training_separates_two_sinusoid_classes() {
    let data = bundle(50);
    let mut m = model(false);
    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 0.05,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let report = train(&mut m, &data, &cfg).unwrap();
    assert!(report.converged);
    assert_eq!(report.epochs.len(), 30);
    assert!(
        report.final_test_accuracy >= 0.99,
        "test accuracy {}",
        report.final_test_accuracy
    );
    assert!(report.epochs.iter().all(|e| (0.0..=1.0).contains(&e.train_accuracy)));
}

fn losses(regime: Regime, eps: f64, beta: f64, gnlm: bool) -> (Vec<f64>, Classifier) {
    let data = bundle(8);
    let mut m = model(gnlm);
    let cfg = TrainConfig {
        regime,
        epochs: 3,
        batch_size: 4,
        learning_rate: 0.05,
        train_epsilon: eps,
        trades_beta: beta,
        seed: 11,
        ..TrainConfig::default()
    };
    let report = train(&mut m, &data, &cfg).unwrap();
    (report.epochs.iter().map(|e| e.train_loss).collect(), m)
}

#[test]
fn vanishing_budget_and_weight_reduce_to_standard_training() {
    for gnlm in [false, true] {
        let (standard, _) = losses(Regime::Standard, 0.3, 1.0, gnlm);
        let (at, _) = losses(Regime::Adversarial, 1e-12, 1.0, gnlm);
        let (trades, _) = losses(Regime::Trades, 0.3, 1e-12, gnlm);
        for ((s, a), t) in standard.iter().zip(&at).zip(&trades) {
            assert!((s - a).abs() <= 1e-6, "AT {a} vs {s}");
            assert!((s - t).abs() <= 1e-6, "TRADES {t} vs {s}");
        }
    }
}

#[test]
fn every_regime_is_bit_deterministic() {
    for regime in [Regime::Standard, Regime::Adversarial, Regime::Trades] {
        let (la, a) = losses(regime, 0.3, 1.0, true);
        let (lb, b) = losses(regime, 0.3, 1.0, true);
        assert_eq!(la, lb);
        assert_eq!(a, b, "{regime:?}");
    }
}

#[test]
fn test_split_does_not_influence_training() {
    let data = bundle(8);
    let mut scrambled = data.clone();
    for s in &mut scrambled.test {
        s.channels = s.channels.map(|v| -3.0 * v);
        s.label = 1 - s.label;
    }
    for regime in [Regime::Adversarial, Regime::Trades] {
        let cfg = TrainConfig {
            regime,
            epochs: 2,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let (mut a, mut b) = (model(false), model(false));
        let ra = train(&mut a, &data, &cfg).unwrap();
        let rb = train(&mut b, &scrambled, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epochs, rb.epochs);
    }
}

#[test]
fn prediction_label_mode_trains() {
    let data = bundle(8);
    let base = TrainConfig {
        regime: Regime::Adversarial,
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut a = model(false);
    let ra = train(&mut a, &data, &base).unwrap();
    let mut b = model(false);
    let rb = train(
        &mut b,
        &data,
        &TrainConfig {
            at_label_mode: LabelMode::ModelPrediction,
            ..base
        },
    )
    .unwrap();
    assert!(ra.converged && rb.converged);
}
