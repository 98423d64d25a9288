use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_label, AttackResult, LabelOracle, ThreatBudget};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tuning knobs for [`boundary_attack`]. Step sizes are relative to the
/// current distance from the clean input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryParams {
    /// Uniform-noise draws allowed to find a misclassified starting point.
    pub init_draws: usize,
    /// Starting points are drawn uniformly from `[−init_range, init_range]`.
    pub init_range: f64,
    pub binary_search_steps: usize,
    pub orthogonal_step: f64,
    pub source_step: f64,
    /// Target rate of fully accepted proposals; drives the step towards `x`.
    pub target_acceptance: f64,
    /// Target rate of adversarial sphere-only candidates; drives the
    /// orthogonal step.
    pub orthogonal_target: f64,
    pub adaptation_factor: f64,
    /// Proposals between step-size updates.
    pub adaptation_window: usize,
}

impl Default for BoundaryParams {
    fn default() -> Self {
        Self {
            init_draws: 1000,
            init_range: 3.0,
            binary_search_steps: 25,
            orthogonal_step: 0.1,
            source_step: 0.05,
            target_acceptance: 0.25,
            orthogonal_target: 0.5,
            adaptation_factor: 1.5,
            adaptation_window: 30,
        }
    }
}

impl BoundaryParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.init_draws == 0
            || self.adaptation_window == 0
            || !positive(self.init_range)
            || !positive(self.orthogonal_step)
            || !(positive(self.source_step) && self.source_step < 1.0)
            || !(positive(self.target_acceptance) && self.target_acceptance < 1.0)
            || !(positive(self.orthogonal_target) && self.orthogonal_target < 1.0)
            || !(self.adaptation_factor.is_finite() && self.adaptation_factor > 1.0)
        {
            return Err(Error::Config(format!("invalid boundary-attack parameters: {self:?}")));
        }
        Ok(())
    }
}

/// Every accepted point of a boundary-attack run, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundaryTrace {
    pub accepted: Vec<Tensor>,
    /// L2 distance of the best point after each acceptance.
    pub best_l2: Vec<f64>,
}

/// Decision-based attack that walks along the decision boundary towards `x`.
///
/// Starts from uniform noise that is already misclassified, binary-searches
/// to the boundary, then alternates random steps along the sphere around `x`
/// with contractions towards it, keeping only proposals that stay
/// misclassified. Both step sizes adapt to their own success rates. The closest such point (in L2) is returned if it lies
/// inside the L∞ budget; otherwise the perturbation is discarded and the
/// result is `x` itself with `success == false`.
pub fn boundary_attack(
    oracle: &LabelOracle<'_>,
    x: &Tensor,
    y: usize,
    budget: ThreatBudget,
    iterations: usize,
    params: &BoundaryParams,
    seed: u64,
) -> Result<AttackResult> {
    run(oracle, x, y, budget, iterations, params, seed, None)
}

/// [`boundary_attack`] that also records every accepted point.
pub fn boundary_attack_traced(
    oracle: &LabelOracle<'_>,
    x: &Tensor,
    y: usize,
    budget: ThreatBudget,
    iterations: usize,
    params: &BoundaryParams,
    seed: u64,
) -> Result<(AttackResult, BoundaryTrace)> {
    let mut trace = BoundaryTrace::default();
    let r = run(oracle, x, y, budget, iterations, params, seed, Some(&mut trace))?;
    Ok((r, trace))
}

#[allow(clippy::too_many_arguments)]
fn run(
    oracle: &LabelOracle<'_>,
    x: &Tensor,
    y: usize,
    budget: ThreatBudget,
    iterations: usize,
    params: &BoundaryParams,
    seed: u64,
    mut trace: Option<&mut BoundaryTrace>,
) -> Result<AttackResult> {
    check_label(oracle.num_classes(), y)?;
    params.validate()?;
    let is_adv = |p: &Tensor| -> Result<bool> { Ok(oracle.label(p)? != y) };

    if is_adv(x)? {
        return Ok(AttackResult::new(x, x.clone(), true, oracle.queries(), None));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = params.init_range;
    let mut start = None;
    let mut closest: Option<(Tensor, f64)> = None;
    for _ in 0..params.init_draws {
        let cand = x.map(|_| rng.random_range(-r..=r));
        if is_adv(&cand)? {
            start = Some(cand);
            break;
        }
        let d = cand.sub(x).norm_l2();
        if closest.as_ref().is_none_or(|(_, best)| d < *best) {
            closest = Some((cand, d));
        }
    }
    let Some(start) = start else {
        let (x_adv, _) = closest.expect("init_draws >= 1");
        return Ok(within_budget(x, x_adv, false, oracle.queries(), budget));
    };

    // Boundary along the segment: lo stays correctly classified, hi adversarial.
    let dir = start.sub(x);
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..params.binary_search_steps {
        let mid = 0.5 * (lo + hi);
        if is_adv(&along(x, &dir, mid))? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut current = along(x, &dir, hi);
    let mut best_l2 = current.sub(x).norm_l2();
    let mut best = current.clone();
    if let Some(t) = trace.as_deref_mut() {
        t.accepted.push(current.clone());
        t.best_l2.push(best_l2);
    }

    let mut orth = params.orthogonal_step;
    let mut source = params.source_step;
    let (mut on_sphere, mut accepted) = (0usize, 0usize);
    for i in 0..iterations {
        // the contracted point is only tried when the sphere point is adversarial
        if let Some(sphere) = orthogonal_step(x, &current, orth, &mut rng) {
            if is_adv(&sphere)? {
                on_sphere += 1;
                let cand = along(x, &sphere.sub(x), 1.0 - source);
                if is_adv(&cand)? {
                    accepted += 1;
                    current = cand;
                    let d = current.sub(x).norm_l2();
                    if d < best_l2 {
                        best_l2 = d;
                        best = current.clone();
                    }
                    if let Some(t) = trace.as_deref_mut() {
                        t.accepted.push(current.clone());
                        t.best_l2.push(best_l2);
                    }
                }
            }
        }
        if (i + 1) % params.adaptation_window == 0 {
            let window = params.adaptation_window as f64;
            let f = params.adaptation_factor;
            orth = if on_sphere as f64 / window > params.orthogonal_target {
                orth * f
            } else {
                orth / f
            };
            source = if accepted as f64 / window > params.target_acceptance {
                (source * f).min(0.5)
            } else {
                source / f
            };
            on_sphere = 0;
            accepted = 0;
        }
    }

    Ok(within_budget(x, best, true, oracle.queries(), budget))
}

fn within_budget(x: &Tensor, x_adv: Tensor, adversarial: bool, queries: usize, budget: ThreatBudget) -> AttackResult {
    if budget.contains(x, &x_adv) {
        AttackResult::new(x, x_adv, adversarial, queries, None)
    } else {
        AttackResult::discarded(x, queries)
    }
}

fn along(x: &Tensor, dir: &Tensor, t: f64) -> Tensor {
    let mut p = x.clone();
    p.axpy(t, dir);
    p
}

/// Gaussian step orthogonal to `current − x`, rescaled back onto the sphere
/// of the current radius. `None` once the current point has collapsed onto `x`.
fn orthogonal_step(x: &Tensor, current: &Tensor, orth: f64, rng: &mut ChaCha8Rng) -> Option<Tensor> {
    let offset = current.sub(x);
    let radius = offset.norm_l2();
    if radius == 0.0 || !radius.is_finite() {
        return None;
    }
    let unit = offset.scale(1.0 / radius);
    let mut eta = offset.map(|_| rng.sample::<f64, _>(StandardNormal));
    let along_unit = eta.dot(&unit);
    eta.axpy(-along_unit, &unit);
    let eta_norm = eta.norm_l2();
    if eta_norm == 0.0 {
        return None;
    }
    let mut moved = offset;
    moved.axpy(orth * radius / eta_norm, &eta);
    let moved_norm = moved.norm_l2();
    Some(along(x, &moved, radius / moved_norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearClassifier;

    fn line_model() -> LinearClassifier {
        // class 1 iff x0 + x1 > 1
        let w = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        LinearClassifier::new(w, Tensor::new(vec![2], vec![0.0, -1.0]).unwrap()).unwrap()
    }

    #[test]
    fn already_misclassified_returns_input() {
        let m = line_model();
        let x = Tensor::new(vec![2], vec![2.0, 2.0]).unwrap();
        let o = LabelOracle::new(&m);
        let r = boundary_attack(
            &o,
            &x,
            0,
            ThreatBudget::linf(0.1).unwrap(),
            50,
            &BoundaryParams::default(),
            0,
        )
        .unwrap();
        assert!(r.success);
        assert_eq!(r.x_adv, x);
        assert_eq!(r.queries, 1);
        assert!(r.loss.is_none());
    }

    #[test]
    fn exhausted_initialization_fails() {
        let m = line_model();
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let params = BoundaryParams {
            init_draws: 5,
            init_range: 0.1,
            ..BoundaryParams::default()
        };
        let o = LabelOracle::new(&m);
        let r = boundary_attack(&o, &x, 0, ThreatBudget::linf(1.0).unwrap(), 50, &params, 0).unwrap();
        assert!(!r.success);
        assert_eq!(r.queries, 6);
        assert!(r.linf_norm <= 0.1);
    }

    #[test]
    fn over_budget_point_is_discarded() {
        let m = line_model();
        let x = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let o = LabelOracle::new(&m);
        let p = BoundaryParams::default();
        let (r, trace) = boundary_attack_traced(&o, &x, 0, ThreatBudget::linf(0.1).unwrap(), 200, &p, 3).unwrap();
        // the boundary is at L∞ distance 0.5
        assert!(!r.success);
        assert_eq!(r.x_adv, x);
        assert!(trace.accepted.last().unwrap().sub(&x).norm_linf() > 0.1);
        let wide = boundary_attack(
            &LabelOracle::new(&m),
            &x,
            0,
            ThreatBudget::linf(5.0).unwrap(),
            200,
            &p,
            3,
        )
        .unwrap();
        assert!(wide.success);
        assert!(wide.linf_norm >= 0.5);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = BoundaryParams {
            source_step: 1.0,
            ..BoundaryParams::default()
        };
        assert!(p.validate().is_err());
    }
}
