use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_label, AttackResult, ProbabilityOracle, ThreatBudget};
use crate::error::Result;
use crate::tensor::Tensor;

/// Coordinate-wise black-box attack.
///
/// Visits every coordinate once in a seeded random order, tries `+ε` then
/// `−ε`, and commits whichever lowers the probability of the original label
/// more (`+ε` on ties). Coordinates where neither helps stay untouched. Stops
/// as soon as the label flips.
pub fn simba(
    oracle: &ProbabilityOracle<'_>,
    x: &Tensor,
    y: usize,
    budget: ThreatBudget,
    seed: u64,
) -> Result<AttackResult> {
    check_label(oracle.num_classes(), y)?;
    let eps = budget.epsilon();
    let first = oracle.query(x)?;
    if first.label != y {
        return Ok(AttackResult::new(
            x,
            x.clone(),
            true,
            oracle.queries(),
            Some(first.loss(y)),
        ));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut x_adv = x.clone();
    // compared in log space so confident predictions do not saturate at 1
    let mut log_prob = first.log_probs[y];
    let mut success = false;
    for &i in &order {
        let base = x_adv.data()[i];
        let trial = |delta: f64| -> Result<_> {
            let mut cand = x_adv.clone();
            cand.data_mut()[i] = base + delta;
            let q = oracle.query(&cand)?;
            Ok((q.log_probs[y], q))
        };
        let (p_plus, q_plus) = trial(eps)?;
        let (p_minus, q_minus) = trial(-eps)?;
        let (p_best, q_best, delta) = if p_plus <= p_minus {
            (p_plus, q_plus, eps)
        } else {
            (p_minus, q_minus, -eps)
        };
        if p_best < log_prob {
            x_adv.data_mut()[i] = base + delta;
            log_prob = p_best;
            if q_best.label != y {
                success = true;
                break;
            }
        }
    }
    Ok(AttackResult::new(x, x_adv, success, oracle.queries(), Some(-log_prob)))
}
