//! Tape-based eager reverse-mode automatic differentiation.
//!
//! Every primitive evaluates immediately and appends a node to the [`Tape`]
//! holding its output and whatever the backward rule needs. Nodes are only
//! ever appended, so index order is a topological order and
//! [`Tape::backward`] simply walks the nodes from the output down to zero.
//!
//! ```
//! use tsrobust::autodiff::Tape;
//! use tsrobust::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let w = tape.leaf(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap());
//! let b = tape.leaf(Tensor::zeros(&[1]));
//! let y = tape.dense(x, w, b).unwrap();
//! let grads = tape.backward(y, 1.0).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[0.5, -1.0, 2.0]);
//! ```

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) use kernels::{log_softmax, softmax};

/// Width of the non-local means embeddings θ(x) and φ(x).
pub const GNLM_EMBED_DIM: usize = 64;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weights of one Gaussian non-local means block.
#[derive(Debug, Clone, PartialEq)]
pub struct GnlmBlockParams {
    /// `[d, 64]`
    pub theta_weights: Tensor,
    /// `[d, 64]`
    pub phi_weights: Tensor,
    pub d: usize,
}

impl GnlmBlockParams {
    pub fn new(theta_weights: Tensor, phi_weights: Tensor) -> Result<Self> {
        let d = theta_weights.shape().first().copied().unwrap_or(0);
        for (name, w) in [("theta", &theta_weights), ("phi", &phi_weights)] {
            if w.shape() != [d, GNLM_EMBED_DIM] {
                return Err(Error::Config(format!(
                    "gnlm {name} weights must be [{d}, {GNLM_EMBED_DIM}], got {:?}",
                    w.shape()
                )));
            }
        }
        Ok(Self {
            theta_weights,
            phi_weights,
            d,
        })
    }
}

enum Op {
    Leaf,
    Conv1d {
        input: Var,
        kernels: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    MaxPool1d {
        input: Var,
        argmax: Vec<usize>,
    },
    Gnlm {
        input: Var,
        theta_w: Var,
        phi_w: Var,
        saved: kernels::GnlmForward,
    },
    GlobalAvgPool {
        input: Var,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    KlDivergence {
        p: Var,
        q: Var,
        p_probs: Vec<f64>,
        q_probs: Vec<f64>,
        log_ratio: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Record of the primitives applied during one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, with zeros where the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Registers an input or parameter. Leaves are also how values are detached.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by a backward pass".into()));
        }
        Ok(())
    }

    /// Same-length zero-padded cross-correlation of `[C_in, T]` with `[C_out, C_in, K]` kernels.
    pub fn conv1d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        self.check_live()?;
        let (x, w, b) = (self.value(input), self.value(kernels), self.value(bias));
        if x.rank() != 2 || w.rank() != 3 || b.rank() != 1 {
            return Err(Error::Config(format!(
                "conv1d expects [C,T], [O,C,K], [O]; got {:?}, {:?}, {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let (c_in, t) = (x.dim(0), x.dim(1));
        let (c_out, k) = (w.dim(0), w.dim(2));
        if w.dim(1) != c_in || b.dim(0) != c_out {
            return Err(Error::Config(format!(
                "conv1d shape mismatch: input {:?}, kernels {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size {k} must be odd")));
        }
        let out = kernels::conv1d_forward(x.data(), w.data(), b.data(), c_in, c_out, k, t);
        let value = Tensor::new(vec![c_out, t], out)?;
        Ok(self.push(value, Op::Conv1d { input, kernels, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check_live()?;
        let value = self.value(input).map(|v| v.max(0.0));
        Ok(self.push(value, Op::Relu { input }))
    }

    /// Non-overlapping max pooling over time; a trailing partial window is pooled too.
    pub fn maxpool1d(&mut self, input: Var, window: usize) -> Result<Var> {
        self.check_live()?;
        if window == 0 {
            return Err(Error::Config("maxpool window must be at least 1".into()));
        }
        let x = self.value(input);
        if x.rank() != 2 {
            return Err(Error::Config(format!("maxpool1d expects [C,T], got {:?}", x.shape())));
        }
        let (c, t) = (x.dim(0), x.dim(1));
        let (out, argmax) = kernels::maxpool1d_forward(x.data(), c, t, window);
        let value = Tensor::new(vec![c, t.div_ceil(window)], out)?;
        Ok(self.push(value, Op::MaxPool1d { input, argmax }))
    }

    /// Gaussian non-local means: every time step becomes a softmax-weighted
    /// average of all time steps, with weights `exp(θ(x_i)·φ(x_j) / √d)`.
    pub fn gnlm(&mut self, input: Var, theta_weights: Var, phi_weights: Var) -> Result<Var> {
        self.check_live()?;
        let (x, tw, pw) = (self.value(input), self.value(theta_weights), self.value(phi_weights));
        if x.rank() != 2 {
            return Err(Error::Config(format!("gnlm expects [C,T], got {:?}", x.shape())));
        }
        let (c, t) = (x.dim(0), x.dim(1));
        if tw.rank() != 2 || tw.dim(0) != c || tw.shape() != pw.shape() {
            return Err(Error::Config(format!(
                "gnlm weights {:?}/{:?} do not match {c} input channels",
                tw.shape(),
                pw.shape()
            )));
        }
        let e = tw.dim(1);
        let saved = kernels::gnlm_forward(x.data(), tw.data(), pw.data(), c, e, t);
        let value = Tensor::new(vec![c, t], saved.output.clone())?;
        Ok(self.push(
            value,
            Op::Gnlm {
                input,
                theta_w: theta_weights,
                phi_w: phi_weights,
                saved,
            },
        ))
    }

    /// Mean over time: `[C, T] -> [C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(input);
        if x.rank() != 2 {
            return Err(Error::Config(format!(
                "global_avg_pool expects [C,T], got {:?}",
                x.shape()
            )));
        }
        let (c, t) = (x.dim(0), x.dim(1));
        let out = x
            .data()
            .chunks(t)
            .map(|row| row.iter().sum::<f64>() / t as f64)
            .collect();
        let value = Tensor::new(vec![c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input }))
    }

    /// Affine map `W x + b`; `x` of any shape is read flat.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        self.check_live()?;
        let (x, w, b) = (self.value(input), self.value(weights), self.value(bias));
        if w.rank() != 2 || w.dim(1) != x.len() || b.shape() != [w.dim(0)] {
            return Err(Error::Config(format!(
                "dense shape mismatch: input {:?}, weights {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let n = x.len();
        let out = w
            .data()
            .chunks(n)
            .zip(b.data())
            .map(|(row, bias)| bias + row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let value = Tensor::new(vec![w.dim(0)], out)?;
        Ok(self.push(value, Op::Dense { input, weights, bias }))
    }

    /// `-log softmax(logits)[label]`, as a one-element tensor.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        self.check_live()?;
        let z = self.value(logits);
        if label >= z.len() {
            return Err(Error::Usage(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let log_probs = log_softmax(z.data());
        let probs = log_probs.iter().map(|v| v.exp()).collect();
        let value = Tensor::scalar(-log_probs[label]);
        Ok(self.push(value, Op::CrossEntropy { logits, label, probs }))
    }

    /// `KL(softmax(p) ‖ softmax(q))`; differentiable in both arguments.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        self.check_live()?;
        let (pz, qz) = (self.value(p), self.value(q));
        if pz.len() != qz.len() {
            return Err(Error::Config(format!(
                "kl_divergence length mismatch: {} vs {}",
                pz.len(),
                qz.len()
            )));
        }
        let lp = log_softmax(pz.data());
        let lq = log_softmax(qz.data());
        let p_probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let q_probs: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
        let log_ratio: Vec<f64> = lp.iter().zip(&lq).map(|(a, b)| a - b).collect();
        let kl = p_probs.iter().zip(&log_ratio).map(|(p, r)| p * r).sum::<f64>();
        Ok(self.push(
            Tensor::scalar(kl),
            Op::KlDivergence {
                p,
                q,
                p_probs,
                q_probs,
                log_ratio,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(Error::Config(format!(
                "add shape mismatch {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let value = x.add(y);
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.check_live()?;
        let value = self.value(input).scale(factor);
        Ok(self.push(value, Op::Scale { input, factor }))
    }

    /// Propagates `seed` (broadcast over `output`'s shape) back through the
    /// tape. A tape supports exactly one backward pass.
    pub fn backward(&mut self, output: Var, seed: f64) -> Result<Gradients> {
        self.check_live()?;
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("variable {} is not on this tape", output.0)));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(Tensor::full(self.nodes[output.0].value.shape(), seed));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv1d { input, kernels, bias } => {
                    let (x, w) = (self.value(*input), self.value(*kernels));
                    let (c_in, t) = (x.dim(0), x.dim(1));
                    let (c_out, k) = (w.dim(0), w.dim(2));
                    let r = kernels::conv1d_backward(g.data(), x.data(), w.data(), c_in, c_out, k, t);
                    accumulate(&mut grads, *input, x.shape(), r.input);
                    accumulate(&mut grads, *kernels, w.shape(), r.kernels);
                    accumulate(&mut grads, *bias, &[c_out], r.bias);
                }
                Op::Relu { input } => {
                    let x = self.value(*input);
                    let gx = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *input, x.shape(), gx);
                }
                Op::MaxPool1d { input, argmax } => {
                    let x = self.value(*input);
                    let mut gx = vec![0.0; x.len()];
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        gx[src] += gv;
                    }
                    accumulate(&mut grads, *input, x.shape(), gx);
                }
                Op::Gnlm {
                    input,
                    theta_w,
                    phi_w,
                    saved,
                } => {
                    let (x, tw, pw) = (self.value(*input), self.value(*theta_w), self.value(*phi_w));
                    let (c, t) = (x.dim(0), x.dim(1));
                    let e = tw.dim(1);
                    let r = kernels::gnlm_backward(g.data(), x.data(), tw.data(), pw.data(), saved, c, e, t);
                    accumulate(&mut grads, *input, x.shape(), r.input);
                    accumulate(&mut grads, *theta_w, tw.shape(), r.theta_w);
                    accumulate(&mut grads, *phi_w, pw.shape(), r.phi_w);
                }
                Op::GlobalAvgPool { input } => {
                    let x = self.value(*input);
                    let t = x.dim(1);
                    let gx = g
                        .data()
                        .iter()
                        .flat_map(|&gv| std::iter::repeat_n(gv / t as f64, t))
                        .collect();
                    accumulate(&mut grads, *input, x.shape(), gx);
                }
                Op::Dense { input, weights, bias } => {
                    let (x, w) = (self.value(*input), self.value(*weights));
                    let n_in = x.len();
                    let mut gx = vec![0.0; n_in];
                    let mut gw = vec![0.0; w.len()];
                    for (o, &gv) in g.data().iter().enumerate() {
                        let row = &w.data()[o * n_in..(o + 1) * n_in];
                        let grow = &mut gw[o * n_in..(o + 1) * n_in];
                        for i in 0..n_in {
                            gx[i] += gv * row[i];
                            grow[i] = gv * x.data()[i];
                        }
                    }
                    accumulate(&mut grads, *input, x.shape(), gx);
                    accumulate(&mut grads, *weights, w.shape(), gw);
                    accumulate(&mut grads, *bias, &[w.dim(0)], g.data().to_vec());
                }
                Op::CrossEntropy { logits, label, probs } => {
                    let s = g.item();
                    let gz = probs
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| s * (p - if i == *label { 1.0 } else { 0.0 }))
                        .collect();
                    accumulate(&mut grads, *logits, &[probs.len()], gz);
                }
                Op::KlDivergence {
                    p,
                    q,
                    p_probs,
                    q_probs,
                    log_ratio,
                } => {
                    let s = g.item();
                    let kl = node.value.item();
                    let gp = p_probs.iter().zip(log_ratio).map(|(pp, r)| s * pp * (r - kl)).collect();
                    let gq = q_probs.iter().zip(p_probs).map(|(qq, pp)| s * (qq - pp)).collect();
                    accumulate(&mut grads, *p, &[p_probs.len()], gp);
                    accumulate(&mut grads, *q, &[q_probs.len()], gq);
                }
                Op::Add { a, b } => {
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *a, &shape, g.data().to_vec());
                    accumulate(&mut grads, *b, &shape, g.into_data());
                }
                Op::Scale { input, factor } => {
                    let shape = g.shape().to_vec();
                    let gx = g.data().iter().map(|v| v * factor).collect();
                    accumulate(&mut grads, *input, &shape, gx);
                }
            }
        }

        // interior gradients were taken as they were propagated; only leaves remain
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape matches its node"));
        }
    }
}
