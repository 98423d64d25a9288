//! Robust accuracy, robustness curves over an ε grid, and perturbation audits.
//!
//! Norms are always recomputed here from `x_adv − x`; the attack's own
//! bookkeeping is only compared against, never trusted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackKind, AttackResult, AttackSpec, ThreatBudget, BUDGET_TOLERANCE};
use crate::data::LabeledSequence;
use crate::error::{Error, Result};
use crate::model::DifferentiableModel;
use crate::tensor::{argmax, Tensor};

pub const CSV_HEADER: &str = "attack,epsilon,robust_accuracy,mean_queries,n_examples";

/// Largest tolerated disagreement between reported and recomputed norms.
pub const NORM_TOLERANCE: f64 = 1e-9;

pub fn default_epsilon_grid() -> Vec<f64> {
    vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub epsilon_grid: Vec<f64>,
    pub attacks: Vec<AttackSpec>,
    /// Keep adversarial examples found at smaller ε as candidates at larger ε.
    pub carry_forward: bool,
    pub seed: u64,
    /// Evaluate only the first `n` test examples.
    pub max_examples: Option<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            epsilon_grid: default_epsilon_grid(),
            attacks: AttackSpec::defaults(),
            carry_forward: true,
            seed: 0,
            max_examples: None,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon_grid.is_empty() {
            return Err(Error::Config("epsilon grid is empty".into()));
        }
        if self.epsilon_grid.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::Config(format!(
                "epsilon grid must be positive: {:?}",
                self.epsilon_grid
            )));
        }
        if self.epsilon_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "epsilon grid must be strictly increasing: {:?}",
                self.epsilon_grid
            )));
        }
        if self.attacks.is_empty() {
            return Err(Error::Config("no attacks configured".into()));
        }
        self.attacks.iter().try_for_each(AttackSpec::validate)
    }
}

/// Norms of `x_adv − x` as recomputed by [`audit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditReport {
    pub linf_norm: f64,
    pub l2_norm: f64,
    pub l0_norm: f64,
    /// An over-budget boundary-attack result was discarded.
    pub downgraded: bool,
}

/// Recomputes the perturbation norms and enforces the budget.
///
/// Reported norms that disagree with the recomputed ones by more than
/// [`NORM_TOLERANCE`] are an internal-consistency error, as is any result
/// outside the ball. The exception is the boundary attack, whose over-budget
/// results are discarded: `x_adv` is reset to `x` and `success` cleared.
pub fn audit(x: &Tensor, result: &mut AttackResult, kind: AttackKind, epsilon: f64) -> Result<AuditReport> {
    if !result.x_adv.same_shape(x) {
        return Err(Error::Consistency(format!(
            "{}: x_adv has shape {:?}, input {:?}",
            kind.as_str(),
            result.x_adv.shape(),
            x.shape()
        )));
    }
    let delta = result.x_adv.sub(x);
    let (linf, l2, l0) = (delta.norm_linf(), delta.norm_l2(), delta.norm_l0());
    for (name, reported, actual) in [
        ("linf", result.linf_norm, linf),
        ("l2", result.l2_norm, l2),
        ("l0", result.l0_norm, l0),
    ] {
        let diff = (reported - actual).abs();
        if diff.is_nan() || diff > NORM_TOLERANCE {
            return Err(Error::Consistency(format!(
                "{}: reported {name} norm {reported} but perturbation has {actual}",
                kind.as_str()
            )));
        }
    }
    if linf <= epsilon + BUDGET_TOLERANCE {
        return Ok(AuditReport {
            linf_norm: linf,
            l2_norm: l2,
            l0_norm: l0,
            downgraded: false,
        });
    }
    if kind != AttackKind::Boundary {
        return Err(Error::Consistency(format!(
            "{}: perturbation L∞ norm {linf} exceeds budget {epsilon}",
            kind.as_str()
        )));
    }
    *result = AttackResult::discarded(x, result.queries);
    Ok(AuditReport {
        linf_norm: 0.0,
        l2_norm: 0.0,
        l0_norm: 0.0,
        downgraded: true,
    })
}

/// Attack seed for one example, independent of evaluation order.
pub fn example_seed(protocol_seed: u64, spec: &AttackSpec, example_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(protocol_seed.to_le_bytes());
    h.update(spec.seed.to_le_bytes());
    h.update(spec.name().as_bytes());
    h.update([0]);
    h.update(example_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleOutcome {
    pub id: String,
    pub clean_correct: bool,
    /// The final candidate is still classified as the ground truth.
    pub robust: bool,
    pub result: AttackResult,
    pub audit: AuditReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustAccuracy {
    pub accuracy: f64,
    pub clean_accuracy: f64,
    /// Clean-misclassified examples whose returned candidate is classified
    /// correctly, as a fraction of all examples.
    pub flipped_fraction: f64,
    pub mean_queries: f64,
    pub outcomes: Vec<ExampleOutcome>,
}

/// Attacks every example against its ground-truth label at radius `epsilon`.
///
/// An example is robust iff the audited candidate is classified as its label,
/// whether or not the clean input was.
pub fn robust_accuracy(
    model: &dyn DifferentiableModel,
    examples: &[LabeledSequence],
    attack: &AttackSpec,
    epsilon: f64,
    protocol_seed: u64,
) -> Result<RobustAccuracy> {
    evaluate_at(model, examples, attack, epsilon, protocol_seed, None)
}

fn evaluate_at(
    model: &dyn DifferentiableModel,
    examples: &[LabeledSequence],
    attack: &AttackSpec,
    epsilon: f64,
    protocol_seed: u64,
    mut carried: Option<&mut Vec<Option<Tensor>>>,
) -> Result<RobustAccuracy> {
    if examples.is_empty() {
        return Err(Error::Usage("no examples to evaluate".into()));
    }
    attack.validate()?;
    let budget = ThreatBudget::linf(epsilon)?;
    let mut outcomes = Vec::with_capacity(examples.len());
    let (mut robust, mut clean, mut flipped, mut queries) = (0usize, 0usize, 0usize, 0usize);
    for (i, ex) in examples.iter().enumerate() {
        let x = &ex.channels;
        let clean_correct = argmax(model.logits(x)?.data()) == ex.label;
        let seed = example_seed(protocol_seed, attack, &ex.id);
        let mut result = attack.run(model, x, ex.label, budget, seed)?;
        let report = audit(x, &mut result, attack.kind, epsilon)?;
        let mut is_robust = argmax(model.logits(&result.x_adv)?.data()) == ex.label;

        if let Some(carry) = carried.as_deref_mut() {
            let slot = &mut carry[i];
            if !is_robust {
                *slot = Some(result.x_adv.clone());
            } else if let Some(prev) = slot.as_ref() {
                // nested balls: an earlier adversarial example is still admissible
                if !budget.contains(x, prev) {
                    return Err(Error::Consistency(format!(
                        "carried example for {} left the ball",
                        ex.id
                    )));
                }
                is_robust = false;
            }
        }

        robust += is_robust as usize;
        clean += clean_correct as usize;
        flipped += (!clean_correct && is_robust) as usize;
        queries += result.queries;
        outcomes.push(ExampleOutcome {
            id: ex.id.clone(),
            clean_correct,
            robust: is_robust,
            result,
            audit: report,
        });
    }
    let n = examples.len() as f64;
    let out = RobustAccuracy {
        accuracy: robust as f64 / n,
        clean_accuracy: clean as f64 / n,
        flipped_fraction: flipped as f64 / n,
        mean_queries: queries as f64 / n,
        outcomes,
    };
    if out.accuracy > out.clean_accuracy + out.flipped_fraction + 1e-12 {
        return Err(Error::Consistency(format!(
            "robust accuracy {} exceeds clean accuracy {} plus flips {}",
            out.accuracy, out.clean_accuracy, out.flipped_fraction
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub robust_accuracy: f64,
    pub mean_queries: f64,
    pub n_examples: usize,
    pub flipped_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub attack: String,
    /// Accuracy at ε = 0, the curve's reference point.
    pub clean_accuracy: f64,
    pub points: Vec<CurvePoint>,
}

/// One curve per attack over the protocol's ε grid, in ascending ε.
///
/// With carry-forward, examples start out carrying themselves when already
/// misclassified, and every adversarial example found stays a candidate at
/// larger radii, so each curve is non-increasing.
pub fn robustness_curve(
    model: &dyn DifferentiableModel,
    test: &[LabeledSequence],
    protocol: &EvalProtocol,
) -> Result<Vec<RobustnessCurve>> {
    protocol.validate()?;
    let examples = match protocol.max_examples {
        Some(n) => &test[..n.min(test.len())],
        None => test,
    };
    if examples.is_empty() {
        return Err(Error::Usage("no examples to evaluate".into()));
    }
    let clean_accuracy = {
        let mut correct = 0usize;
        for ex in examples {
            correct += (argmax(model.logits(&ex.channels)?.data()) == ex.label) as usize;
        }
        correct as f64 / examples.len() as f64
    };

    let mut curves = Vec::with_capacity(protocol.attacks.len());
    for spec in &protocol.attacks {
        let mut carried: Vec<Option<Tensor>> = Vec::with_capacity(examples.len());
        for ex in examples {
            let wrong = argmax(model.logits(&ex.channels)?.data()) != ex.label;
            carried.push(wrong.then(|| ex.channels.clone()));
        }
        let mut points = Vec::with_capacity(protocol.epsilon_grid.len());
        for &eps in &protocol.epsilon_grid {
            let carry = protocol.carry_forward.then_some(&mut carried);
            let r = evaluate_at(model, examples, spec, eps, protocol.seed, carry)?;
            points.push(CurvePoint {
                epsilon: eps,
                robust_accuracy: r.accuracy,
                mean_queries: r.mean_queries,
                n_examples: examples.len(),
                flipped_fraction: r.flipped_fraction,
            });
        }
        curves.push(RobustnessCurve {
            attack: spec.name().to_string(),
            clean_accuracy,
            points,
        });
    }
    Ok(curves)
}

/// Renders curves in the CSV layout of [`CSV_HEADER`].
pub fn curves_to_csv(curves: &[RobustnessCurve]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for c in curves {
        for p in &c.points {
            writeln!(
                out,
                "{},{},{},{},{}",
                c.attack, p.epsilon, p.robust_accuracy, p.mean_queries, p.n_examples
            )
            .expect("writing to a String");
        }
    }
    out
}

/// One parsed data row of a curves CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub attack: String,
    pub epsilon: f64,
    pub robust_accuracy: f64,
    pub mean_queries: f64,
    pub n_examples: usize,
}

/// Parses a curves CSV; errors name the offending 1-based line.
pub fn parse_curves_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((i, h)) => {
            return Err(Error::Load {
                path: "<csv>".into(),
                line: Some(i + 1),
                message: format!("expected header `{CSV_HEADER}`, got `{h}`"),
            })
        }
        None => {
            return Err(Error::Load {
                path: "<csv>".into(),
                line: None,
                message: "empty file".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let bad = |m: String| Error::Load {
            path: "<csv>".into(),
            line: Some(i + 1),
            message: m,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("field {} is not a finite number: `{}`", k + 1, fields[k])))
        };
        let row = CsvRow {
            attack: fields[0].to_string(),
            epsilon: num(1)?,
            robust_accuracy: num(2)?,
            mean_queries: num(3)?,
            n_examples: fields[4]
                .parse()
                .map_err(|_| bad(format!("n_examples is not an integer: `{}`", fields[4])))?,
        };
        if row.attack.is_empty() {
            return Err(bad("empty attack name".into()));
        }
        if !(0.0..=1.0).contains(&row.robust_accuracy) {
            return Err(bad(format!("robust_accuracy {} outside [0, 1]", row.robust_accuracy)));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Load {
            path: "<csv>".into(),
            line: None,
            message: "no data rows".into(),
        });
    }
    Ok(rows)
}
