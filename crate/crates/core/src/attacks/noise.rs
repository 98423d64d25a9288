use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_label, uniform_offset, AttackResult, CandidateScore, ProbabilityOracle, ThreatBudget};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Best of `n` uniform random perturbations in the ε-ball.
///
/// Misclassifying candidates rank above the rest, then higher cross-entropy
/// against `y`. Exactly `n` queries.
pub fn noise_attack(
    oracle: &ProbabilityOracle<'_>,
    x: &Tensor,
    y: usize,
    budget: ThreatBudget,
    n: usize,
    seed: u64,
) -> Result<AttackResult> {
    check_label(oracle.num_classes(), y)?;
    if n == 0 {
        return Err(Error::Config("noise: need at least one draw".into()));
    }
    let eps = budget.epsilon();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(n);
    let mut best: Option<(Tensor, CandidateScore)> = None;
    for _ in 0..n {
        let cand = x.map(|v| v + uniform_offset(&mut rng, eps));
        let q = oracle.query(&cand)?;
        let s = CandidateScore {
            success: q.label != y,
            loss: q.loss(y),
        };
        scores.push(s);
        if best.as_ref().is_none_or(|(_, b)| s.beats(b)) {
            best = Some((cand, s));
        }
    }
    let (x_adv, s) = best.expect("n >= 1");
    Ok(AttackResult::new(x, x_adv, s.success, oracle.queries(), Some(s.loss)).with_restarts(scores))
}
