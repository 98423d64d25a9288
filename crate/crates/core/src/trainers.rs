//! Minibatch training under the standard, adversarial and TRADES regimes.
//!
//! Training reads the train and validation splits only; test accuracy is
//! filled in after the last epoch. Shuffling and inner attacks draw from
//! separate random streams, so a vanishing budget or TRADES weight reproduces
//! standard training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_ascent, ThreatBudget};
use crate::autodiff::Tape;
use crate::data::{DatasetBundle, LabeledSequence};
use crate::error::{Error, Result};
use crate::model::{Classifier, DifferentiableModel, LossTarget};
use crate::tensor::{argmax, Tensor};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Standard,
    Adversarial,
    Trades,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Standard => "standard",
            Regime::Adversarial => "adversarial",
            Regime::Trades => "trades",
        }
    }
}

/// Which label the adversarial-training inner attack pushes away from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    GroundTruth,
    /// The current model's prediction on the clean input.
    ModelPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// L∞ radius of the inner maximization.
    pub train_epsilon: f64,
    pub inner_steps: usize,
    pub inner_restarts: usize,
    /// Weight of the KL smoothness term.
    pub trades_beta: f64,
    /// Half-width of the uniform noise the TRADES inner search starts from.
    pub trades_init_noise: f64,
    pub at_label_mode: LabelMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Standard,
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.01,
            train_epsilon: 0.3,
            inner_steps: 7,
            inner_restarts: 1,
            trades_beta: 1.0,
            trades_init_noise: 0.001,
            at_label_mode: LabelMode::GroundTruth,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.regime != Regime::Standard {
            if !(self.train_epsilon.is_finite() && self.train_epsilon > 0.0) {
                return bad(format!("train_epsilon must be > 0, got {}", self.train_epsilon));
            }
            if self.inner_steps == 0 || self.inner_restarts == 0 {
                return bad("inner_steps and inner_restarts must be >= 1".into());
            }
        }
        if self.regime == Regime::Trades {
            if !(self.trades_beta.is_finite() && self.trades_beta > 0.0) {
                return bad(format!("trades_beta must be > 0, got {}", self.trades_beta));
            }
            if !(self.trades_init_noise.is_finite() && self.trades_init_noise >= 0.0) {
                return bad("trades_init_noise must be >= 0".into());
            }
        }
        Ok(())
    }

    fn inner_step_size(&self) -> f64 {
        2.0 * self.train_epsilon / self.inner_steps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training objective over the epoch.
    pub train_loss: f64,
    /// Accuracy on the inputs actually trained on, before each update.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub format_version: u32,
    pub regime: Regime,
    pub epochs: Vec<EpochStats>,
    /// Clean accuracy on the whole train split after training.
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    pub converged: bool,
    pub divergence: Option<String>,
}

/// Trains `model` in place under `config.regime`.
pub fn train(model: &mut Classifier, bundle: &DatasetBundle, config: &TrainConfig) -> Result<TrainReport> {
    train_with_progress(model, bundle, config, &mut |_| {})
}

/// [`train`] that reports each finished epoch to `progress`.
pub fn train_with_progress(
    model: &mut Classifier,
    bundle: &DatasetBundle,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<TrainReport> {
    config.validate()?;
    if !bundle.is_normalized() {
        return Err(Error::Usage("training expects a normalized dataset".into()));
    }
    if bundle.num_classes != model.config().num_classes || bundle.channels() != model.config().in_channels {
        return Err(Error::Usage(format!(
            "dataset has {} classes and {} channels; model expects {} and {}",
            bundle.num_classes,
            bundle.channels(),
            model.config().num_classes,
            model.config().in_channels
        )));
    }
    let fit = fit(model, &bundle.train, &bundle.val, config, progress)?;
    let final_train_accuracy = accuracy(model, &bundle.train)?.unwrap_or(0.0);
    let final_test_accuracy = accuracy(model, &bundle.test)?.unwrap_or(0.0);
    Ok(TrainReport {
        format_version: REPORT_FORMAT_VERSION,
        regime: config.regime,
        epochs: fit.epochs,
        final_train_accuracy,
        final_test_accuracy,
        converged: fit.divergence.is_none(),
        divergence: fit.divergence,
    })
}

pub fn train_standard(model: &mut Classifier, bundle: &DatasetBundle, config: &TrainConfig) -> Result<TrainReport> {
    train(
        model,
        bundle,
        &TrainConfig {
            regime: Regime::Standard,
            ..config.clone()
        },
    )
}

pub fn train_adversarial(model: &mut Classifier, bundle: &DatasetBundle, config: &TrainConfig) -> Result<TrainReport> {
    train(
        model,
        bundle,
        &TrainConfig {
            regime: Regime::Adversarial,
            ..config.clone()
        },
    )
}

pub fn train_trades(model: &mut Classifier, bundle: &DatasetBundle, config: &TrainConfig) -> Result<TrainReport> {
    train(
        model,
        bundle,
        &TrainConfig {
            regime: Regime::Trades,
            ..config.clone()
        },
    )
}

/// Clean accuracy; `None` for an empty split.
pub fn accuracy(model: &dyn DifferentiableModel, split: &[LabeledSequence]) -> Result<Option<f64>> {
    if split.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for s in split {
        correct += (argmax(model.logits(&s.channels)?.data()) == s.label) as usize;
    }
    Ok(Some(correct as f64 / split.len() as f64))
}

struct Fit {
    epochs: Vec<EpochStats>,
    divergence: Option<String>,
}

/// One example's contribution: objective value, parameter gradients and
/// whether the input it was evaluated on was classified correctly.
struct ExampleStep {
    loss: f64,
    grads: BTreeMap<String, Tensor>,
    correct: bool,
}

fn fit(
    model: &mut Classifier,
    train: &[LabeledSequence],
    val: &[LabeledSequence],
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<Fit> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut attack_rng = ChaCha8Rng::seed_from_u64(config.seed);
    attack_rng.set_stream(1);

    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let mut sum: Option<BTreeMap<String, Tensor>> = None;
            for &i in batch {
                let step = example_step(model, &train[i], config, &mut attack_rng)?;
                loss_sum += step.loss;
                correct += step.correct as usize;
                match sum.as_mut() {
                    None => sum = Some(step.grads),
                    Some(acc) => {
                        for (name, g) in &step.grads {
                            acc.get_mut(name).expect("same parameter set").axpy(1.0, g);
                        }
                    }
                }
            }
            let mean: BTreeMap<String, Tensor> = sum
                .expect("non-empty batch")
                .into_iter()
                .map(|(n, g)| (n, g.scale(1.0 / batch.len() as f64)))
                .collect();
            model.apply_update(&mean, config.learning_rate);
            if !loss_sum.is_finite() || !model.parameters_finite() {
                return Ok(Fit {
                    epochs,
                    divergence: Some(format!("non-finite loss or parameters in epoch {epoch}")),
                });
            }
        }
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_accuracy: accuracy(model, val)?,
        };
        progress(&stats);
        epochs.push(stats);
    }
    Ok(Fit {
        epochs,
        divergence: None,
    })
}

fn example_step(
    model: &Classifier,
    example: &LabeledSequence,
    config: &TrainConfig,
    attack_rng: &mut ChaCha8Rng,
) -> Result<ExampleStep> {
    let x = &example.channels;
    let y = example.label;
    match config.regime {
        Regime::Standard => supervised_step(model, x, y),
        Regime::Adversarial => {
            let target = match config.at_label_mode {
                LabelMode::GroundTruth => y,
                LabelMode::ModelPrediction => argmax(model.logits(x)?.data()),
            };
            let x_adv = inner_max(
                model,
                x,
                &LossTarget::CrossEntropy(target),
                config,
                config.train_epsilon,
                attack_rng,
            )?;
            supervised_step(model, &x_adv, y)
        }
        Regime::Trades => trades_step(model, x, y, config, attack_rng),
    }
}

fn supervised_step(model: &Classifier, x: &Tensor, y: usize) -> Result<ExampleStep> {
    let mut tape = Tape::new();
    let params = model.register_parameters(&mut tape);
    let input = tape.leaf(x.clone());
    let logits = model.forward(&mut tape, &params, input)?;
    let correct = argmax(tape.value(logits).data()) == y;
    let loss = tape.cross_entropy(logits, y)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss, 1.0)?;
    Ok(ExampleStep {
        loss: value,
        grads: params.iter().map(|(n, v)| (n.clone(), grads.take(*v))).collect(),
        correct,
    })
}

/// Best of `inner_restarts` PGD runs on `target`, each from a uniform start
/// of half-width `start_noise` (clipped into the training ball).
fn inner_max(
    model: &Classifier,
    x: &Tensor,
    target: &LossTarget,
    config: &TrainConfig,
    start_noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    use rand::Rng;
    let budget = ThreatBudget::linf(config.train_epsilon)?;
    let mut best: Option<(Tensor, f64)> = None;
    for _ in 0..config.inner_restarts {
        let start = x.map(|v| v + rng.random_range(-start_noise..=start_noise));
        let cand = pgd_ascent(
            model,
            x,
            target,
            budget,
            config.inner_steps,
            config.inner_step_size(),
            start,
        )?;
        if config.inner_restarts == 1 {
            return Ok(cand);
        }
        let loss = model.loss(&cand, target)?;
        if best.as_ref().is_none_or(|(_, b)| loss > *b) {
            best = Some((cand, loss));
        }
    }
    Ok(best.expect("inner_restarts >= 1").0)
}

/// `CE(f(x), y) + β · KL(f(x) ‖ f(x'))` with `x'` maximizing the KL term
/// against the current (frozen) clean prediction.
fn trades_step(
    model: &Classifier,
    x: &Tensor,
    y: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ExampleStep> {
    let clean_logits = model.logits(x)?;
    let target = LossTarget::KlFromReference(clean_logits);
    let x_adv = inner_max(model, x, &target, config, config.trades_init_noise, rng)?;

    let mut tape = Tape::new();
    let params = model.register_parameters(&mut tape);
    let clean_in = tape.leaf(x.clone());
    let clean = model.forward(&mut tape, &params, clean_in)?;
    let correct = argmax(tape.value(clean).data()) == y;
    let ce = tape.cross_entropy(clean, y)?;
    let adv_in = tape.leaf(x_adv);
    let adv = model.forward(&mut tape, &params, adv_in)?;
    let kl = tape.kl_divergence(clean, adv)?;
    let weighted = tape.scale(kl, config.trades_beta)?;
    let total = tape.add(ce, weighted)?;
    let value = tape.value(total).item();
    let mut grads = tape.backward(total, 1.0)?;
    Ok(ExampleStep {
        loss: value,
        grads: params.iter().map(|(n, v)| (n.clone(), grads.take(*v))).collect(),
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize, synth_generate};
    use crate::model::{ConvBlockConfig, ModelConfig};

    fn tiny() -> (Classifier, DatasetBundle) {
        let bundle = normalize(&synth_generate(2, 6, 1, 12, 3)).unwrap();
        let model = Classifier::build(ModelConfig {
            in_channels: 1,
            num_classes: 2,
            conv_blocks: vec![ConvBlockConfig { filters: 3, kernel: 3 }],
            use_gnlm: false,
            seed: 1,
        })
        .unwrap();
        (model, bundle)
    }

    #[test]
    fn zero_epochs_leaves_model_untouched() {
        let (mut model, bundle) = tiny();
        let before = model.clone();
        let report = train(
            &mut model,
            &bundle,
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(model, before);
        assert!(report.epochs.is_empty());
        assert!(report.converged);
    }

    #[test]
    fn rejects_unnormalized_data_and_bad_configs() {
        let (mut model, _) = tiny();
        let raw = synth_generate(2, 6, 1, 12, 3);
        assert!(matches!(
            train(&mut model, &raw, &TrainConfig::default()),
            Err(Error::Usage(_))
        ));
        let cfg = TrainConfig {
            regime: Regime::Trades,
            trades_beta: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            regime: Regime::Adversarial,
            train_epsilon: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn divergence_is_reported_not_fatal() {
        let (mut model, bundle) = tiny();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e308,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &bundle, &cfg).unwrap();
        assert!(!report.converged);
        assert!(report.divergence.is_some());
    }

    #[test]
    fn trades_kl_vanishes_at_clean_input() {
        let (model, bundle) = tiny();
        let x = &bundle.train[0].channels;
        let mut tape = Tape::new();
        let params = model.register_parameters(&mut tape);
        let a = tape.leaf(x.clone());
        let b = tape.leaf(x.clone());
        let za = model.forward(&mut tape, &params, a).unwrap();
        let zb = model.forward(&mut tape, &params, b).unwrap();
        let kl = tape.kl_divergence(za, zb).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);
    }

    #[test]
    fn inner_maximizers_stay_in_the_training_ball() {
        let (model, bundle) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for restarts in [1, 3] {
            let cfg = TrainConfig {
                train_epsilon: 0.2,
                inner_restarts: restarts,
                ..TrainConfig::default()
            };
            for s in &bundle.train {
                let x = &s.channels;
                let ce = inner_max(&model, x, &LossTarget::CrossEntropy(s.label), &cfg, 0.2, &mut rng).unwrap();
                assert!(ce.sub(x).norm_linf() <= 0.2 + 1e-9);
                let kl = LossTarget::KlFromReference(model.logits(x).unwrap());
                let adv = inner_max(&model, x, &kl, &cfg, 0.001, &mut rng).unwrap();
                assert!(adv.sub(x).norm_linf() <= 0.2 + 1e-9);
            }
        }
    }

    #[test]
    fn report_round_trips_through_json() {
        let (mut model, bundle) = tiny();
        let report = train(
            &mut model,
            &bundle,
            &TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let s = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<TrainReport>(&s).unwrap(), report);
    }
}
