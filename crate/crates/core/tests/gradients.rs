//! Loop oracles for every primitive and central finite-difference checks of
//! reverse-mode gradients (step 1e-4, relative error ≤ 1e-3, 20 instances each).

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsrobust::autodiff::{Tape, Var, GNLM_EMBED_DIM};
use tsrobust::model::{Classifier, ConvBlockConfig, DifferentiableModel, LossTarget, ModelConfig};
use tsrobust::Tensor;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;
const INSTANCES: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Evaluates `build` (which must return a one-element node) on fresh tapes.
fn eval(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).item()
}

/// Largest per-tensor relative error between analytic and central-difference gradients.
fn grad_check(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out, 1.0).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            *slot = (eval(&plus, build) - eval(&minus, build)) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// Reduces any node to a scalar via a fixed random projection.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let n = tape.value(v).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.leaf(random(&mut rng, &[1, n], 1.0));
    let zero = tape.leaf(Tensor::zeros(&[1]));
    tape.dense(v, r, zero).unwrap()
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (c_in, t) = (x.dim(0), x.dim(1));
    let (c_out, k) = (w.dim(0), w.dim(2));
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; c_out * t];
    for o in 0..c_out {
        for i in 0..t {
            let mut acc = b.data()[o];
            for c in 0..c_in {
                for kk in 0..k {
                    let j = i as isize + kk as isize - pad;
                    if j >= 0 && (j as usize) < t {
                        acc += w.data()[(o * c_in + c) * k + kk] * x.data()[c * t + j as usize];
                    }
                }
            }
            out[o * t + i] = acc;
        }
    }
    out
}

fn gnlm_oracle(x: &Tensor, tw: &Tensor, pw: &Tensor) -> Vec<f64> {
    let (c, t) = (x.dim(0), x.dim(1));
    let e = tw.dim(1);
    let col = |i: usize| -> Vec<f64> { (0..c).map(|ch| x.data()[ch * t + i]).collect() };
    let embed = |w: &Tensor, xi: &[f64]| -> Vec<f64> {
        (0..e)
            .map(|m| (0..c).map(|ch| w.data()[ch * e + m] * xi[ch]).sum())
            .collect()
    };
    let mut out = vec![0.0; c * t];
    for i in 0..t {
        let theta_i = embed(tw, &col(i));
        let mut total = 0.0;
        let mut acc = vec![0.0; c];
        for j in 0..t {
            let phi_j = embed(pw, &col(j));
            let dot: f64 = theta_i.iter().zip(&phi_j).map(|(a, b)| a * b).sum();
            let f = (dot / (c as f64).sqrt()).exp();
            total += f;
            for (ch, a) in acc.iter_mut().enumerate() {
                *a += f * x.data()[ch * t + j];
            }
        }
        for ch in 0..c {
            out[ch * t + i] = acc[ch] / total;
        }
    }
    out
}

#[test]
fn conv1d_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..INSTANCES {
        let x = random(&mut rng, &[2, 7], 1.0);
        let w = random(&mut rng, &[3, 2, 3], 1.0);
        let b = random(&mut rng, &[3], 1.0);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.conv1d(xv, wv, bv).unwrap();
        let oracle = conv_oracle(&x, &w, &b);
        for (a, o) in tape.value(y).data().iter().zip(&oracle) {
            assert!((a - o).abs() <= 1e-10);
        }
    }
}

#[test]
fn conv1d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..INSTANCES {
        let k = [1, 3, 5][seed as usize % 3];
        let inputs = [
            random(&mut rng, &[2, 6], 1.0),
            random(&mut rng, &[3, 2, k], 1.0),
            random(&mut rng, &[3], 1.0),
        ];
        let err = grad_check(&inputs, &|tape, v| {
            let y = tape.conv1d(v[0], v[1], v[2]).unwrap();
            project(tape, y, seed)
        });
        assert!(err <= TOL, "conv1d instance {seed}: {err}");
    }
}

#[test]
fn maxpool_matches_loop_oracle_and_routes_one_hot() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..INSTANCES {
        let x = random(&mut rng, &[3, 11], 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = tape.maxpool1d(xv, 2).unwrap();
        let out = tape.value(y).clone();
        assert_eq!(out.shape(), &[3, 6]);
        for c in 0..3 {
            for w in 0..6 {
                let window = &x.data()[c * 11 + 2 * w..c * 11 + (2 * w + 2).min(11)];
                let m = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(out.data()[c * 6 + w], m);
            }
        }
        let ones = tape.leaf(Tensor::full(&[1, 18], 1.0));
        let zero = tape.leaf(Tensor::zeros(&[1]));
        let s = tape.dense(y, ones, zero).unwrap();
        let g = tape.backward(s, 1.0).unwrap().wrt(xv);
        for c in 0..3 {
            for w in 0..6 {
                let lo = c * 11 + 2 * w;
                let hi = c * 11 + (2 * w + 2).min(11);
                let window = &g.data()[lo..hi];
                assert_eq!(window.iter().sum::<f64>(), 1.0);
                assert_eq!(window.iter().filter(|&&v| v == 1.0).count(), 1);
                let arg = lo + window.iter().position(|&v| v == 1.0).unwrap();
                assert_eq!(x.data()[arg], out.data()[c * 6 + w]);
            }
        }
        let err = grad_check(&[x], &|tape, v| {
            let y = tape.maxpool1d(v[0], 2).unwrap();
            project(tape, y, seed)
        });
        assert!(err <= TOL, "maxpool instance {seed}: {err}");
    }
}

#[test]
fn gnlm_matches_double_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..INSTANCES {
        let x = random(&mut rng, &[4, 6], 1.0);
        let tw = random(&mut rng, &[4, GNLM_EMBED_DIM], 0.3);
        let pw = random(&mut rng, &[4, GNLM_EMBED_DIM], 0.3);
        let mut tape = Tape::new();
        let (xv, tv, pv) = (tape.leaf(x.clone()), tape.leaf(tw.clone()), tape.leaf(pw.clone()));
        let y = tape.gnlm(xv, tv, pv).unwrap();
        let oracle = gnlm_oracle(&x, &tw, &pw);
        for (a, o) in tape.value(y).data().iter().zip(&oracle) {
            assert!((a - o).abs() <= 1e-8, "{a} vs {o}");
        }
    }
}

#[test]
fn gnlm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..INSTANCES {
        let inputs = [
            random(&mut rng, &[4, 6], 1.0),
            random(&mut rng, &[4, GNLM_EMBED_DIM], 0.3),
            random(&mut rng, &[4, GNLM_EMBED_DIM], 0.3),
        ];
        let err = grad_check(&inputs, &|tape, v| {
            let y = tape.gnlm(v[0], v[1], v[2]).unwrap();
            project(tape, y, seed)
        });
        assert!(err <= 1e-4, "gnlm instance {seed}: {err}");
    }
}

#[test]
fn dense_matches_loop_oracle_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..INSTANCES {
        let x = random(&mut rng, &[3], 1.0);
        let w = random(&mut rng, &[4, 3], 1.0);
        let b = random(&mut rng, &[4], 1.0);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.dense(xv, wv, bv).unwrap();
        for o in 0..4 {
            let mut acc = b.data()[o];
            for i in 0..3 {
                acc += w.data()[o * 3 + i] * x.data()[i];
            }
            assert!((tape.value(y).data()[o] - acc).abs() < 1e-12);
        }
        let err = grad_check(&[x, w, b], &|tape, v| {
            let y = tape.dense(v[0], v[1], v[2]).unwrap();
            project(tape, y, seed)
        });
        assert!(err <= 1e-4, "dense instance {seed}: {err}");
    }
}

#[test]
fn relu_and_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..INSTANCES {
        let err = grad_check(&[random(&mut rng, &[3, 5], 1.0)], &|tape, v| {
            let r = tape.relu(v[0]).unwrap();
            let p = tape.global_avg_pool(r).unwrap();
            project(tape, p, seed)
        });
        assert!(err <= TOL, "relu/gap instance {seed}: {err}");
    }
}

#[test]
fn cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..INSTANCES {
        let label = (seed % 5) as usize;
        let err = grad_check(&[random(&mut rng, &[5], 3.0)], &|tape, v| {
            tape.cross_entropy(v[0], label).unwrap()
        });
        assert!(err <= 1e-5, "cross entropy instance {seed}: {err}");
    }
}

#[test]
fn kl_gradients_in_both_arguments() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..INSTANCES {
        let inputs = [random(&mut rng, &[6], 2.0), random(&mut rng, &[6], 2.0)];
        let err = grad_check(&inputs, &|tape, v| tape.kl_divergence(v[0], v[1]).unwrap());
        assert!(err <= 1e-4, "kl instance {seed}: {err}");
    }
}

fn small_model(use_gnlm: bool, seed: u64) -> Classifier {
    Classifier::build(ModelConfig {
        in_channels: 3,
        num_classes: 4,
        conv_blocks: vec![
            ConvBlockConfig { filters: 4, kernel: 3 },
            ConvBlockConfig { filters: 3, kernel: 5 },
        ],
        use_gnlm,
        seed,
    })
    .unwrap()
}

/// Central differences for `model` parameter `name` at coordinate `j`.
fn fd_param(model: &Classifier, name: &str, j: usize, x: &Tensor, target: &LossTarget, step: f64) -> f64 {
    let mut plus = model.clone();
    plus.parameter_mut(name).unwrap().data_mut()[j] += step;
    let mut minus = model.clone();
    minus.parameter_mut(name).unwrap().data_mut()[j] -= step;
    (plus.loss(x, target).unwrap() - minus.loss(x, target).unwrap()) / (2.0 * step)
}

fn fd_input(model: &Classifier, x: &Tensor, target: &LossTarget, step: f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let mut plus = x.clone();
            plus.data_mut()[j] += step;
            let mut minus = x.clone();
            minus.data_mut()[j] -= step;
            (model.loss(&plus, target).unwrap() - model.loss(&minus, target).unwrap()) / (2.0 * step)
        })
        .collect()
}

/// Central differences at the checked step for every parameter and the
/// input, or `None` when the instance sits within one step of a relu or
/// max-pool kink (detected by the differences disagreeing with a 10x smaller
/// step, without consulting the analytic gradient).
fn smooth_fd(model: &Classifier, x: &Tensor, target: &LossTarget) -> Option<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    for (name, p) in model.parameters() {
        let coarse: Vec<f64> = (0..p.len())
            .map(|j| fd_param(model, name, j, x, target, STEP))
            .collect();
        let fine: Vec<f64> = (0..p.len())
            .map(|j| fd_param(model, name, j, x, target, STEP / 10.0))
            .collect();
        if rel_err(&coarse, &fine) > 1e-5 {
            return None;
        }
        out.push((name.clone(), coarse));
    }
    let coarse = fd_input(model, x, target, STEP);
    if rel_err(&coarse, &fd_input(model, x, target, STEP / 10.0)) > 1e-5 {
        return None;
    }
    out.push(("input".into(), coarse));
    Some(out)
}

#[test]
fn composed_model_gradients_all_coordinates() {
    let mut checked = 0;
    let mut rejected = 0;
    let mut seed = 0u64;
    while checked < INSTANCES {
        seed += 1;
        let model = small_model(seed.is_multiple_of(2), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random(&mut rng, &[3, 12], 1.5);
        let target = if seed.is_multiple_of(3) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            LossTarget::KlFromReference(random(&mut r, &[4], 1.0))
        } else {
            LossTarget::CrossEntropy(seed as usize % 4)
        };
        let Some(numeric) = smooth_fd(&model, &x, &target) else {
            rejected += 1;
            assert!(rejected < INSTANCES, "too many instances near kinks");
            continue;
        };
        let (_, grads) = model.loss_and_gradients(&x, &target).unwrap();
        for (name, fd) in &numeric {
            let analytic = if name == "input" {
                &grads.input
            } else {
                &grads.params[name]
            };
            let err = rel_err(analytic.data(), fd);
            assert!(err <= TOL, "instance {seed} {name}: {err}");
        }

        let (_, g2) = model.loss_and_input_grad(&x, &target).unwrap();
        assert_eq!(g2, grads.input);
        checked += 1;
    }
}

#[test]
fn reference_model_gradients_sampled_coordinates() {
    for (seed, use_gnlm) in [(1u64, true), (2, false)] {
        let model = Classifier::build(ModelConfig::reference(3, 20, use_gnlm, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[3, 24], 1.0);
        let target = LossTarget::CrossEntropy(3);
        let (_, grads) = model.loss_and_gradients(&x, &target).unwrap();
        for (name, g) in &grads.params {
            let coords: Vec<usize> = (0..8).map(|_| rng.random_range(0..g.len())).collect();
            let analytic: Vec<f64> = coords.iter().map(|&j| g.data()[j]).collect();
            let numeric: Vec<f64> = coords
                .iter()
                .map(|&j| fd_param(&model, name, j, &x, &target, STEP))
                .collect();
            let err = rel_err(&analytic, &numeric);
            assert!(err <= TOL, "reference parameter {name}: {err}");
        }
        let err = rel_err(grads.input.data(), &fd_input(&model, &x, &target, STEP));
        assert!(err <= TOL, "reference input: {err}");
    }
}

#[test]
fn zeroed_first_layer_gives_exactly_zero_input_gradient() {
    let mut model = small_model(false, 3);
    model.parameter_mut("block0.conv.weight").unwrap().data_mut().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, &[3, 10], 1.0);
    let (_, g) = model.loss_and_input_grad(&x, &LossTarget::CrossEntropy(1)).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let model = small_model(true, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[3, 16], 1.0);
    let a = model.loss_and_gradients(&x, &LossTarget::CrossEntropy(2)).unwrap();
    let b = model.loss_and_gradients(&x, &LossTarget::CrossEntropy(2)).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1.input, b.1.input);
    assert_eq!(a.1.params, b.1.params);
}

proptest! {
    #[test]
    fn softmax_probabilities_normalized(logits in prop::collection::vec(-50.0f64..50.0, 2..30)) {
        let p = tsrobust::model::Prediction::from_logits(Tensor::new(vec![logits.len()], logits.clone()).unwrap());
        prop_assert!(p.probs.data().iter().all(|&v| v >= 0.0));
        prop_assert!((p.probs.sum() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(p.label, p.probs.argmax());
    }

    #[test]
    fn kl_is_nonnegative(p in prop::collection::vec(-20.0f64..20.0, 5), q in prop::collection::vec(-20.0f64..20.0, 5)) {
        let mut tape = Tape::new();
        let pv = tape.leaf(Tensor::new(vec![5], p).unwrap());
        let qv = tape.leaf(Tensor::new(vec![5], q).unwrap());
        let kl = tape.kl_divergence(pv, qv).unwrap();
        prop_assert!(tape.value(kl).item() >= -1e-12);
        let same = tape.kl_divergence(pv, pv).unwrap();
        prop_assert!(tape.value(same).item().abs() <= 1e-12);
    }

    #[test]
    fn gnlm_output_stays_in_channel_envelope(
        x in prop::collection::vec(-5.0f64..5.0, 3 * 7),
        w in prop::collection::vec(-1.0f64..1.0, 2 * 3 * GNLM_EMBED_DIM),
    ) {
        let x = Tensor::new(vec![3, 7], x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let tv = tape.leaf(Tensor::new(vec![3, GNLM_EMBED_DIM], w[..3 * GNLM_EMBED_DIM].to_vec()).unwrap());
        let pv = tape.leaf(Tensor::new(vec![3, GNLM_EMBED_DIM], w[3 * GNLM_EMBED_DIM..].to_vec()).unwrap());
        let y = tape.gnlm(xv, tv, pv).unwrap();
        for c in 0..3 {
            let row = &x.data()[c * 7..(c + 1) * 7];
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in &tape.value(y).data()[c * 7..(c + 1) * 7] {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
