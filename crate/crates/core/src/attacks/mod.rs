//! Untargeted L∞ evasion attacks.
//!
//! Every attack goes after the ground-truth label `y`, never the model's own
//! prediction, so an example the model already gets wrong is never nudged
//! back to its correct class. No box constraint is applied to inputs.
//!
//! Access levels are enforced by type: [`boundary_attack`] only sees a
//! [`LabelOracle`], [`noise_attack`] and [`simba`] only a [`ProbabilityOracle`],
//! and the gradient attacks take the model itself.

mod boundary;
mod gradient;
mod noise;
mod simba;

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::log_softmax;
use crate::error::{Error, Result};
use crate::model::DifferentiableModel;
use crate::tensor::{argmax, Tensor};

pub use boundary::{boundary_attack, boundary_attack_traced, BoundaryParams, BoundaryTrace};
pub use gradient::{fgsm, pgd, pgd_ascent};
pub use noise::noise_attack;
pub use simba::simba;

/// Slack allowed on `‖x_adv − x‖∞ ≤ ε`.
pub const BUDGET_TOLERANCE: f64 = 1e-9;

/// An L∞ ball of radius `epsilon` around the clean input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreatBudget {
    epsilon: f64,
}

impl ThreatBudget {
    /// `epsilon` must be finite and non-negative; zero is the identity budget.
    pub fn linf(epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Clips `candidate − x` coordinate-wise into `[−ε, ε]`.
    pub fn project(&self, x: &Tensor, candidate: &Tensor) -> Tensor {
        let eps = self.epsilon;
        x.zip_map(candidate, |c, v| v.max(c - eps).min(c + eps))
    }

    pub fn contains(&self, x: &Tensor, candidate: &Tensor) -> bool {
        candidate.sub(x).norm_linf() <= self.epsilon + BUDGET_TOLERANCE
    }
}

/// Loss and success of one restart or candidate, kept for inspection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub success: bool,
    /// Cross-entropy against the original label.
    pub loss: f64,
}

impl CandidateScore {
    /// Successful beats unsuccessful; otherwise higher loss wins. Ties keep `other`.
    pub fn beats(&self, other: &CandidateScore) -> bool {
        match (self.success, other.success) {
            (true, false) => true,
            (false, true) => false,
            _ => self.loss > other.loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub x_adv: Tensor,
    /// `argmax f(x_adv) ≠ y`, additionally within budget for the boundary attack.
    pub success: bool,
    /// Model evaluations consumed: gradient evaluations for white-box attacks,
    /// oracle queries otherwise.
    pub queries: usize,
    pub linf_norm: f64,
    pub l2_norm: f64,
    pub l0_norm: f64,
    /// Cross-entropy of `x_adv` against `y`; absent for label-only attacks.
    pub loss: Option<f64>,
    /// One entry per restart (gradient attacks) or candidate (noise).
    pub restarts: Vec<CandidateScore>,
}

impl AttackResult {
    pub(crate) fn new(x: &Tensor, x_adv: Tensor, success: bool, queries: usize, loss: Option<f64>) -> Self {
        let delta = x_adv.sub(x);
        Self {
            linf_norm: delta.norm_linf(),
            l2_norm: delta.norm_l2(),
            l0_norm: delta.norm_l0(),
            x_adv,
            success,
            queries,
            loss,
            restarts: Vec::new(),
        }
    }

    /// No perturbation and no success: what remains after a result is thrown
    /// out for exceeding the budget.
    pub(crate) fn discarded(x: &Tensor, queries: usize) -> Self {
        Self::new(x, x.clone(), false, queries, None)
    }

    fn with_restarts(mut self, restarts: Vec<CandidateScore>) -> Self {
        self.restarts = restarts;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Noise,
    Fgsm,
    Pgd,
    Boundary,
    Simba,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Noise => "noise",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Boundary => "boundary",
            AttackKind::Simba => "simba",
        }
    }
}

/// Step size of iterative gradient attacks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum StepSizeRule {
    /// `α = 2ε / steps`, recomputed for every budget.
    #[default]
    TwiceEpsilonOverSteps,
    /// `α = value · ε`.
    EpsilonFraction(f64),
}

impl StepSizeRule {
    pub fn step_size(&self, epsilon: f64, steps: usize) -> f64 {
        match *self {
            StepSizeRule::TwiceEpsilonOverSteps => 2.0 * epsilon / steps as f64,
            StepSizeRule::EpsilonFraction(f) => f * epsilon,
        }
    }
}

/// A configured attack. `restarts` is the number of random starts for the
/// gradient attacks and the number of noise draws for the noise attack;
/// `steps` is the PGD iteration count and the boundary-attack proposal count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub restarts: usize,
    pub steps: usize,
    #[serde(default)]
    pub step_size_rule: StepSizeRule,
    #[serde(default)]
    pub boundary: BoundaryParams,
    #[serde(default)]
    pub seed: u64,
}

impl AttackSpec {
    fn with(kind: AttackKind, restarts: usize, steps: usize) -> Self {
        Self {
            kind,
            restarts,
            steps,
            step_size_rule: StepSizeRule::default(),
            boundary: BoundaryParams::default(),
            seed: 0,
        }
    }

    /// NOISE-100.
    pub fn noise() -> Self {
        Self::with(AttackKind::Noise, 100, 1)
    }

    /// FGSM-100.
    pub fn fgsm() -> Self {
        Self::with(AttackKind::Fgsm, 100, 1)
    }

    /// PGD-10 with 100 steps.
    pub fn pgd() -> Self {
        Self::with(AttackKind::Pgd, 10, 100)
    }

    pub fn boundary() -> Self {
        Self::with(AttackKind::Boundary, 1, 1000)
    }

    pub fn simba() -> Self {
        Self::with(AttackKind::Simba, 1, 1)
    }

    /// The five evaluation attacks in reporting order.
    pub fn defaults() -> Vec<Self> {
        vec![
            Self::noise(),
            Self::fgsm(),
            Self::pgd(),
            Self::boundary(),
            Self::simba(),
        ]
    }

    pub fn name(&self) -> &'static str {
        self.kind.as_str()
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Config(format!("{}: restarts must be >= 1", self.name())));
        }
        if self.steps == 0 && matches!(self.kind, AttackKind::Pgd | AttackKind::Boundary) {
            return Err(Error::Config(format!("{}: steps must be >= 1", self.name())));
        }
        if let StepSizeRule::EpsilonFraction(f) = self.step_size_rule {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::Config(format!("{}: step fraction must be > 0", self.name())));
            }
        }
        self.boundary.validate()
    }

    /// Runs this attack on one example with an explicit seed.
    pub fn run(
        &self,
        model: &dyn DifferentiableModel,
        x: &Tensor,
        y: usize,
        budget: ThreatBudget,
        seed: u64,
    ) -> Result<AttackResult> {
        self.validate()?;
        match self.kind {
            AttackKind::Noise => noise_attack(&ProbabilityOracle::new(model), x, y, budget, self.restarts, seed),
            AttackKind::Fgsm => fgsm(model, x, y, budget, self.restarts, seed),
            AttackKind::Pgd => {
                let alpha = self.step_size_rule.step_size(budget.epsilon(), self.steps);
                gradient::pgd_with_step(model, x, y, budget, self.restarts, self.steps, alpha, seed)
            }
            AttackKind::Boundary => {
                boundary_attack(&LabelOracle::new(model), x, y, budget, self.steps, &self.boundary, seed)
            }
            AttackKind::Simba => simba(&ProbabilityOracle::new(model), x, y, budget, seed),
        }
    }
}

/// Hard-label access to a model; counts every query.
pub struct LabelOracle<'a> {
    model: &'a dyn DifferentiableModel,
    queries: Cell<usize>,
}

impl<'a> LabelOracle<'a> {
    pub fn new(model: &'a dyn DifferentiableModel) -> Self {
        Self {
            model,
            queries: Cell::new(0),
        }
    }

    pub fn label(&self, x: &Tensor) -> Result<usize> {
        self.queries.set(self.queries.get() + 1);
        Ok(argmax(self.model.logits(x)?.data()))
    }

    pub fn queries(&self) -> usize {
        self.queries.get()
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }
}

/// Output of one probability query.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityQuery {
    pub log_probs: Vec<f64>,
    pub label: usize,
}

impl ProbabilityQuery {
    pub fn prob(&self, class: usize) -> f64 {
        self.log_probs[class].exp()
    }

    /// Cross-entropy against `class`.
    pub fn loss(&self, class: usize) -> f64 {
        -self.log_probs[class]
    }
}

/// Score-based access to a model (class probabilities, no gradients); counts
/// every query.
pub struct ProbabilityOracle<'a> {
    model: &'a dyn DifferentiableModel,
    queries: Cell<usize>,
}

impl<'a> ProbabilityOracle<'a> {
    pub fn new(model: &'a dyn DifferentiableModel) -> Self {
        Self {
            model,
            queries: Cell::new(0),
        }
    }

    pub fn query(&self, x: &Tensor) -> Result<ProbabilityQuery> {
        self.queries.set(self.queries.get() + 1);
        let logits = self.model.logits(x)?;
        Ok(ProbabilityQuery {
            log_probs: log_softmax(logits.data()),
            label: argmax(logits.data()),
        })
    }

    pub fn queries(&self) -> usize {
        self.queries.get()
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }
}

fn check_label(model_classes: usize, y: usize) -> Result<()> {
    if y >= model_classes {
        return Err(Error::Usage(format!(
            "label {y} out of range for {model_classes} classes"
        )));
    }
    Ok(())
}

/// Uniform draw in `[−eps, eps]`; exactly zero for a zero budget.
fn uniform_offset<R: rand::Rng>(rng: &mut R, eps: f64) -> f64 {
    if eps > 0.0 {
        rng.random_range(-eps..=eps)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_rejects_negative_and_nan() {
        assert!(ThreatBudget::linf(-0.1).is_err());
        assert!(ThreatBudget::linf(f64::NAN).is_err());
        assert_eq!(ThreatBudget::linf(0.0).unwrap().epsilon(), 0.0);
    }

    #[test]
    fn projection_clips_each_coordinate() {
        let b = ThreatBudget::linf(0.5).unwrap();
        let x = Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap();
        let c = Tensor::new(vec![3], vec![2.0, 0.8, -3.0]).unwrap();
        assert_eq!(b.project(&x, &c).data(), &[0.5, 0.8, -1.5]);
        let zero = ThreatBudget::linf(0.0).unwrap();
        assert_eq!(zero.project(&x, &c), x);
    }

    #[test]
    fn ranking_prefers_success_then_loss() {
        let ok = CandidateScore {
            success: true,
            loss: 0.1,
        };
        let bad = CandidateScore {
            success: false,
            loss: 9.0,
        };
        assert!(ok.beats(&bad));
        assert!(!bad.beats(&ok));
        let ok2 = CandidateScore {
            success: true,
            loss: 0.2,
        };
        assert!(ok2.beats(&ok));
        assert!(!ok.beats(&ok));
    }

    #[test]
    fn alpha_rule() {
        assert_eq!(StepSizeRule::TwiceEpsilonOverSteps.step_size(0.3, 100), 0.006);
        assert_eq!(StepSizeRule::EpsilonFraction(0.25).step_size(0.4, 7), 0.1);
    }

    #[test]
    fn spec_json_round_trip() {
        for spec in AttackSpec::defaults() {
            let s = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<AttackSpec>(&s).unwrap(), spec);
        }
        let minimal: AttackSpec = serde_json::from_str(r#"{"kind":"pgd","restarts":2,"steps":5}"#).unwrap();
        assert_eq!(minimal.step_size_rule, StepSizeRule::TwiceEpsilonOverSteps);
    }

    #[test]
    fn invalid_specs() {
        let mut s = AttackSpec::pgd();
        s.restarts = 0;
        assert!(s.validate().is_err());
        let mut s = AttackSpec::pgd();
        s.steps = 0;
        assert!(s.validate().is_err());
    }
}
