//! The reference convolutional classifier and the model interface shared by
//! trainers and attacks.
//!
//! Architecture per conv block: `conv1d (same) → relu → [gnlm] → maxpool(2)`,
//! followed by a global average pool over time and a dense head.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Tape, Var, GNLM_EMBED_DIM};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

pub const POOL_WINDOW: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockConfig {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub conv_blocks: Vec<ConvBlockConfig>,
    pub use_gnlm: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Three blocks of 32, 64, 64 filters with kernel 5.
    pub fn reference(in_channels: usize, num_classes: usize, use_gnlm: bool, seed: u64) -> Self {
        Self {
            in_channels,
            num_classes,
            conv_blocks: reference_blocks(),
            use_gnlm,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::Config("at least one conv block is required".into()));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.filters == 0 {
                return Err(Error::Config(format!("block {i}: filters must be at least 1")));
            }
            if b.kernel % 2 == 0 {
                return Err(Error::Config(format!("block {i}: kernel {} must be odd", b.kernel)));
            }
        }
        Ok(())
    }

    /// Parameter shapes in initialization order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut c_in = self.in_channels;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            shapes.push((conv_weight(i), vec![b.filters, c_in, b.kernel]));
            shapes.push((conv_bias(i), vec![b.filters]));
            if self.use_gnlm {
                shapes.push((gnlm_theta(i), vec![b.filters, GNLM_EMBED_DIM]));
                shapes.push((gnlm_phi(i), vec![b.filters, GNLM_EMBED_DIM]));
            }
            c_in = b.filters;
        }
        shapes.push((HEAD_WEIGHT.into(), vec![self.num_classes, c_in]));
        shapes.push((HEAD_BIAS.into(), vec![self.num_classes]));
        shapes
    }
}

pub fn reference_blocks() -> Vec<ConvBlockConfig> {
    [32, 64, 64]
        .into_iter()
        .map(|filters| ConvBlockConfig { filters, kernel: 5 })
        .collect()
}

const HEAD_WEIGHT: &str = "head.weight";
const HEAD_BIAS: &str = "head.bias";

fn conv_weight(i: usize) -> String {
    format!("block{i}.conv.weight")
}
fn conv_bias(i: usize) -> String {
    format!("block{i}.conv.bias")
}
fn gnlm_theta(i: usize) -> String {
    format!("block{i}.gnlm.theta")
}
fn gnlm_phi(i: usize) -> String {
    format!("block{i}.gnlm.phi")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub probs: Tensor,
    pub label: usize,
}

impl Prediction {
    pub fn from_logits(logits: Tensor) -> Self {
        let probs = Tensor::new(logits.shape().to_vec(), softmax(logits.data())).expect("same shape as logits");
        let label = argmax(logits.data());
        Self { logits, probs, label }
    }
}

/// Which scalar the input gradient is taken of.
#[derive(Debug, Clone, PartialEq)]
pub enum LossTarget {
    /// Cross-entropy against a class index.
    CrossEntropy(usize),
    /// `KL(softmax(reference) ‖ softmax(logits(x)))`, with `reference` held constant.
    KlFromReference(Tensor),
}

/// What attacks and the evaluation harness need from a model.
pub trait DifferentiableModel: Sync {
    fn num_classes(&self) -> usize;

    fn logits(&self, x: &Tensor) -> Result<Tensor>;

    /// Loss value and its exact gradient with respect to `x`.
    fn loss_and_input_grad(&self, x: &Tensor, target: &LossTarget) -> Result<(f64, Tensor)>;

    fn predict(&self, x: &Tensor) -> Result<Prediction> {
        Ok(Prediction::from_logits(self.logits(x)?))
    }

    fn loss(&self, x: &Tensor, target: &LossTarget) -> Result<f64> {
        let logits = self.logits(x)?;
        loss_from_logits(&logits, target)
    }
}

pub(crate) fn loss_from_logits(logits: &Tensor, target: &LossTarget) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let l = record_loss(&mut tape, z, target)?;
    Ok(tape.value(l).item())
}

fn record_loss(tape: &mut Tape, logits: Var, target: &LossTarget) -> Result<Var> {
    match target {
        LossTarget::CrossEntropy(label) => tape.cross_entropy(logits, *label),
        LossTarget::KlFromReference(reference) => {
            let r = tape.leaf(reference.clone());
            tape.kl_divergence(r, logits)
        }
    }
}

/// Gradients of a scalar with respect to every parameter and the input.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub params: BTreeMap<String, Tensor>,
    pub input: Tensor,
}

/// Parameter leaves registered on one tape; reusable across several forward
/// passes on that tape so gradients from each pass accumulate.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// The reference time-series classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

impl Classifier {
    /// Initializes every weight uniformly in `±1/√fan_in` and every bias at zero,
    /// deterministically from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                // conv: c_in * k; gnlm: d; head: c_in
                let fan_in: usize = if shape.len() == 3 {
                    shape[1] * shape[2]
                } else if name.contains(".gnlm.") {
                    shape[0]
                } else {
                    shape[1]
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, tensor);
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a classifier from stored parameters, checking every shape.
    pub fn from_parameters(config: ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {
                    if !t.all_finite() {
                        return Err(Error::Config(format!("parameter {name} is not finite")));
                    }
                }
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn parameters_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// `params -= lr * grads` for every parameter present in `grads`.
    pub fn apply_update(&mut self, grads: &BTreeMap<String, Tensor>, learning_rate: f64) {
        for (name, g) in grads {
            if let Some(p) = self.params.get_mut(name) {
                p.axpy(-learning_rate, g);
            }
        }
    }

    pub fn register_parameters(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        ParamVars { vars }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.dim(0) != self.config.in_channels {
            return Err(Error::Usage(format!(
                "expected input of shape [{}, T], got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `input` on `tape` and returns the logits.
    pub fn forward(&self, tape: &mut Tape, params: &ParamVars, input: Var) -> Result<Var> {
        self.check_input(tape.value(input))?;
        let mut h = input;
        for i in 0..self.config.conv_blocks.len() {
            h = tape.conv1d(h, params.get(&conv_weight(i)), params.get(&conv_bias(i)))?;
            h = tape.relu(h)?;
            if self.config.use_gnlm {
                h = tape.gnlm(h, params.get(&gnlm_theta(i)), params.get(&gnlm_phi(i)))?;
            }
            h = tape.maxpool1d(h, POOL_WINDOW)?;
        }
        h = tape.global_avg_pool(h)?;
        tape.dense(h, params.get(HEAD_WEIGHT), params.get(HEAD_BIAS))
    }

    /// Loss value plus gradients for every parameter and for `x`.
    pub fn loss_and_gradients(&self, x: &Tensor, target: &LossTarget) -> Result<(f64, ModelGradients)> {
        let mut tape = Tape::new();
        let params = self.register_parameters(&mut tape);
        let input = tape.leaf(x.clone());
        let logits = self.forward(&mut tape, &params, input)?;
        let loss = record_loss(&mut tape, logits, target)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss, 1.0)?;
        let params = params.iter().map(|(n, v)| (n.clone(), grads.take(*v))).collect();
        Ok((
            value,
            ModelGradients {
                params,
                input: grads.take(input),
            },
        ))
    }
}

impl DifferentiableModel for Classifier {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.register_parameters(&mut tape);
        let input = tape.leaf(x.clone());
        let logits = self.forward(&mut tape, &params, input)?;
        Ok(tape.value(logits).clone())
    }

    fn loss_and_input_grad(&self, x: &Tensor, target: &LossTarget) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let params = self.register_parameters(&mut tape);
        let input = tape.leaf(x.clone());
        let logits = self.forward(&mut tape, &params, input)?;
        let loss = record_loss(&mut tape, logits, target)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss, 1.0)?;
        Ok((value, grads.take(input)))
    }
}

/// Multinomial logistic regression on the flattened input: `logits = W vec(x) + b`.
///
/// Used as a closed-form test bed for the attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    weights: Tensor,
    bias: Tensor,
}

impl LinearClassifier {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.rank() != 2 || bias.shape() != [weights.dim(0)] || weights.dim(0) < 2 {
            return Err(Error::Config(format!(
                "linear classifier needs [m, n] weights and [m] bias with m >= 2, got {:?} and {:?}",
                weights.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    fn record(&self, tape: &mut Tape, x: &Tensor) -> Result<(Var, Var)> {
        let input = tape.leaf(x.clone());
        let w = tape.leaf(self.weights.clone());
        let b = tape.leaf(self.bias.clone());
        let logits = tape.dense(input, w, b)?;
        Ok((input, logits))
    }
}

impl DifferentiableModel for LinearClassifier {
    fn num_classes(&self) -> usize {
        self.weights.dim(0)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, logits) = self.record(&mut tape, x)?;
        Ok(tape.value(logits).clone())
    }

    fn loss_and_input_grad(&self, x: &Tensor, target: &LossTarget) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let (input, logits) = self.record(&mut tape, x)?;
        let loss = record_loss(&mut tape, logits, target)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss, 1.0)?;
        Ok((value, grads.take(input)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(use_gnlm: bool) -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            num_classes: 3,
            conv_blocks: vec![
                ConvBlockConfig { filters: 4, kernel: 3 },
                ConvBlockConfig { filters: 3, kernel: 5 },
            ],
            use_gnlm,
            seed: 9,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Classifier::build(small_config(true)).unwrap();
        let b = Classifier::build(small_config(true)).unwrap();
        assert_eq!(a, b);
        let mut other = small_config(true);
        other.seed = 10;
        assert_ne!(a, Classifier::build(other).unwrap());
    }

    #[test]
    fn no_gnlm_entries_without_gnlm() {
        let m = Classifier::build(small_config(false)).unwrap();
        assert!(m.parameters().keys().all(|k| !k.contains("gnlm")));
        let m = Classifier::build(small_config(true)).unwrap();
        assert_eq!(m.parameters().keys().filter(|k| k.contains("gnlm")).count(), 4);
    }

    #[test]
    fn reference_parameter_count() {
        // conv: 32*3*5+32, 64*32*5+64, 64*64*5+64; head: 20*64+20
        let m = Classifier::build(ModelConfig::reference(3, 20, false, 1)).unwrap();
        let by_hand = (480 + 32) + (10240 + 64) + (20480 + 64) + (1280 + 20);
        assert_eq!(m.num_parameters(), by_hand);
        assert_eq!(by_hand, 32660);
        // each gnlm block adds two [filters, 64] embeddings
        let m = Classifier::build(ModelConfig::reference(3, 20, true, 1)).unwrap();
        assert_eq!(m.num_parameters(), by_hand + 2 * 64 * (32 + 64 + 64));
    }

    #[test]
    fn init_bounds_and_zero_biases() {
        let m = Classifier::build(small_config(true)).unwrap();
        let w = &m.parameters()["block0.conv.weight"];
        let bound = 1.0 / ((2 * 3) as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(m.parameters()["block1.conv.bias"].data().iter().all(|&v| v == 0.0));
        assert!(m.parameters()["head.bias"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small_config(false);
        c.conv_blocks.clear();
        assert!(matches!(Classifier::build(c), Err(Error::Config(_))));
        let mut c = small_config(false);
        c.conv_blocks[0].kernel = 4;
        assert!(Classifier::build(c).is_err());
        let mut c = small_config(false);
        c.conv_blocks[1].filters = 0;
        assert!(Classifier::build(c).is_err());
    }

    #[test]
    fn output_shape_for_short_and_long_inputs() {
        let m = Classifier::build(ModelConfig::reference(3, 20, true, 4)).unwrap();
        for t in [8, 9, 31, 206] {
            let x = Tensor::full(&[3, t], 0.1);
            let p = m.predict(&x).unwrap();
            assert_eq!(p.logits.shape(), &[20]);
            assert!((p.probs.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_channel_count_is_usage_error() {
        let m = Classifier::build(small_config(false)).unwrap();
        assert!(matches!(m.predict(&Tensor::zeros(&[3, 10])), Err(Error::Usage(_))));
    }

    #[test]
    fn zeroed_model_gives_uniform_loss_and_zero_gradient() {
        let mut m = Classifier::build(small_config(true)).unwrap();
        let names: Vec<String> = m.parameters().keys().cloned().collect();
        for n in names {
            m.parameter_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let x = Tensor::new(vec![2, 7], (0..14).map(|i| (i as f64).sin()).collect()).unwrap();
        let (loss, g) = m.loss_and_input_grad(&x, &LossTarget::CrossEntropy(1)).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kl_against_own_logits_is_zero() {
        let m = Classifier::build(small_config(true)).unwrap();
        let x = Tensor::new(vec![2, 9], (0..18).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let reference = m.logits(&x).unwrap();
        let (loss, g) = m
            .loss_and_input_grad(&x, &LossTarget::KlFromReference(reference))
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.all_finite());
    }

    #[test]
    fn from_parameters_checks_shapes() {
        let m = Classifier::build(small_config(false)).unwrap();
        let mut params = m.parameters().clone();
        assert!(Classifier::from_parameters(small_config(false), params.clone()).is_ok());
        params.insert("head.bias".into(), Tensor::zeros(&[4]));
        assert!(Classifier::from_parameters(small_config(false), params).is_err());
    }
}
