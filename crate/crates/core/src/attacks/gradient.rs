use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_label, uniform_offset, AttackResult, CandidateScore, ThreatBudget};
use crate::autodiff::kernels::log_softmax;
use crate::error::{Error, Result};
use crate::model::{DifferentiableModel, LossTarget};
use crate::tensor::{argmax, Tensor};

fn score(model: &dyn DifferentiableModel, x_adv: &Tensor, y: usize) -> Result<CandidateScore> {
    let logits = model.logits(x_adv)?;
    Ok(CandidateScore {
        success: argmax(logits.data()) != y,
        loss: -log_softmax(logits.data())[y],
    })
}

fn random_start(x: &Tensor, eps: f64, rng: &mut ChaCha8Rng) -> Tensor {
    x.map(|v| v + uniform_offset(rng, eps))
}

fn pick_best(x: &Tensor, candidates: Vec<(Tensor, CandidateScore)>, queries: usize) -> AttackResult {
    let scores: Vec<CandidateScore> = candidates.iter().map(|c| c.1).collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.beats(&scores[best]) {
            best = i;
        }
    }
    let (x_adv, s) = candidates.into_iter().nth(best).expect("at least one candidate");
    AttackResult::new(x, x_adv, s.success, queries, Some(s.loss)).with_restarts(scores)
}

/// Fast gradient sign method with random restarts.
///
/// Restart 0 starts from `x`; later restarts from uniform noise in the ball.
/// Each takes one step of size ε along the gradient sign, then is clipped back
/// into the ball. `queries` counts gradient evaluations.
pub fn fgsm(
    model: &dyn DifferentiableModel,
    x: &Tensor,
    y: usize,
    budget: ThreatBudget,
    restarts: usize,
    seed: u64,
) -> Result<AttackResult> {
    check_label(model.num_classes(), y)?;
    if restarts == 0 {
        return Err(Error::Config("fgsm: restarts must be >= 1".into()));
    }
    let eps = budget.epsilon();
    let target = LossTarget::CrossEntropy(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates = Vec::with_capacity(restarts);
    for r in 0..restarts {
        let start = if r == 0 {
            x.clone()
        } else {
            random_start(x, eps, &mut rng)
        };
        let (_, grad) = model.loss_and_input_grad(&start, &target)?;
        let mut stepped = start;
        stepped.axpy(eps, &grad.signum());
        let cand = budget.project(x, &stepped);
        let s = score(model, &cand, y)?;
        candidates.push((cand, s));
    }
    Ok(pick_best(x, candidates, restarts))
}

/// Projected gradient descent with random restarts and `α = 2ε / steps`.
pub fn pgd(
    model: &dyn DifferentiableModel,
    x: &Tensor,
    y: usize,
    budget: ThreatBudget,
    restarts: usize,
    steps: usize,
    seed: u64,
) -> Result<AttackResult> {
    let alpha = if steps > 0 {
        2.0 * budget.epsilon() / steps as f64
    } else {
        0.0
    };
    pgd_with_step(model, x, y, budget, restarts, steps, alpha, seed)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pgd_with_step(
    model: &dyn DifferentiableModel,
    x: &Tensor,
    y: usize,
    budget: ThreatBudget,
    restarts: usize,
    steps: usize,
    alpha: f64,
    seed: u64,
) -> Result<AttackResult> {
    check_label(model.num_classes(), y)?;
    if restarts == 0 || steps == 0 {
        return Err(Error::Config("pgd: restarts and steps must be >= 1".into()));
    }
    let target = LossTarget::CrossEntropy(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates = Vec::with_capacity(restarts);
    for _ in 0..restarts {
        let start = random_start(x, budget.epsilon(), &mut rng);
        let cand = pgd_ascent(model, x, &target, budget, steps, alpha, start)?;
        let s = score(model, &cand, y)?;
        candidates.push((cand, s));
    }
    Ok(pick_best(x, candidates, restarts * steps))
}

/// `steps` iterations of signed-gradient ascent on `target` from `start`,
/// each followed by clipping into the ball around `x`. Returns the last iterate.
pub fn pgd_ascent(
    model: &dyn DifferentiableModel,
    x: &Tensor,
    target: &LossTarget,
    budget: ThreatBudget,
    steps: usize,
    alpha: f64,
    start: Tensor,
) -> Result<Tensor> {
    let mut x_adv = budget.project(x, &start);
    for _ in 0..steps {
        let (_, grad) = model.loss_and_input_grad(&x_adv, target)?;
        x_adv.axpy(alpha, &grad.signum());
        x_adv = budget.project(x, &x_adv);
    }
    Ok(x_adv)
}
