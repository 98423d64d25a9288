//! Raw forward/backward loops for the tape primitives.
//!
//! All buffers are row-major. Channel-major feature maps are `[C, T]`.

/// Same-length zero-padded cross-correlation.
///
/// `input` is `[c_in, t]`, `kernels` is `[c_out, c_in, k]`, output is `[c_out, t]`.
pub(crate) fn conv1d_forward(
    input: &[f64],
    kernels: &[f64],
    bias: &[f64],
    c_in: usize,
    c_out: usize,
    k: usize,
    t: usize,
) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; c_out * t];
    for o in 0..c_out {
        let row = &mut out[o * t..(o + 1) * t];
        row.fill(bias[o]);
        for c in 0..c_in {
            let x = &input[c * t..(c + 1) * t];
            for kk in 0..k {
                let w = kernels[(o * c_in + c) * k + kk];
                if w == 0.0 {
                    continue;
                }
                // out[i] += w * x[i + kk - pad] over the valid range of i
                let (lo, hi) = valid_range(kk, pad, t);
                let shift = kk as isize - pad as isize;
                for i in lo..hi {
                    row[i] += w * x[(i as isize + shift) as usize];
                }
            }
        }
    }
    out
}

fn valid_range(kk: usize, pad: usize, t: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = (t + pad).saturating_sub(kk).min(t);
    (lo, hi.max(lo))
}

pub(crate) struct Conv1dGrads {
    pub input: Vec<f64>,
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv1d_backward(
    grad_out: &[f64],
    input: &[f64],
    kernels: &[f64],
    c_in: usize,
    c_out: usize,
    k: usize,
    t: usize,
) -> Conv1dGrads {
    let pad = k / 2;
    let mut g_in = vec![0.0; c_in * t];
    let mut g_k = vec![0.0; c_out * c_in * k];
    let mut g_b = vec![0.0; c_out];
    for o in 0..c_out {
        let go = &grad_out[o * t..(o + 1) * t];
        g_b[o] = go.iter().sum();
        for c in 0..c_in {
            let x = &input[c * t..(c + 1) * t];
            for kk in 0..k {
                let w = kernels[(o * c_in + c) * k + kk];
                let (lo, hi) = valid_range(kk, pad, t);
                let shift = kk as isize - pad as isize;
                let mut acc = 0.0;
                let gi = &mut g_in[c * t..(c + 1) * t];
                for (i, &g) in (lo..hi).zip(&go[lo..hi]) {
                    let j = (i as isize + shift) as usize;
                    acc += g * x[j];
                    gi[j] += w * g;
                }
                g_k[(o * c_in + c) * k + kk] = acc;
            }
        }
    }
    Conv1dGrads {
        input: g_in,
        kernels: g_k,
        bias: g_b,
    }
}

/// Non-overlapping window maximum. Returns pooled values and, per output
/// element, the flat input index that won (first index on ties).
pub(crate) fn maxpool1d_forward(input: &[f64], c: usize, t: usize, window: usize) -> (Vec<f64>, Vec<usize>) {
    let t_out = t.div_ceil(window);
    let mut out = Vec::with_capacity(c * t_out);
    let mut arg = Vec::with_capacity(c * t_out);
    for ch in 0..c {
        for w in 0..t_out {
            let start = ch * t + w * window;
            let end = ch * t + ((w + 1) * window).min(t);
            let mut best = start;
            for i in start + 1..end {
                if input[i] > input[best] {
                    best = i;
                }
            }
            out.push(input[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

/// Saved state of a non-local means forward pass.
pub(crate) struct GnlmForward {
    pub output: Vec<f64>,
    /// `[e, t]` embeddings
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    /// `[t, t]` row-stochastic attention weights
    pub weights: Vec<f64>,
}

/// `theta_w`/`phi_w` are `[c, e]`; embeddings are `Wᵀ x`, giving `[e, t]`.
fn embed(w: &[f64], input: &[f64], c: usize, e: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; e * t];
    for ch in 0..c {
        let x = &input[ch * t..(ch + 1) * t];
        for m in 0..e {
            let wv = w[ch * e + m];
            if wv == 0.0 {
                continue;
            }
            let row = &mut out[m * t..(m + 1) * t];
            for (r, &xv) in row.iter_mut().zip(x) {
                *r += wv * xv;
            }
        }
    }
    out
}

pub(crate) fn gnlm_forward(input: &[f64], theta_w: &[f64], phi_w: &[f64], c: usize, e: usize, t: usize) -> GnlmForward {
    let theta = embed(theta_w, input, c, e, t);
    let phi = embed(phi_w, input, c, e, t);
    let scale = 1.0 / (c as f64).sqrt();

    let mut weights = vec![0.0; t * t];
    for m in 0..e {
        let th = &theta[m * t..(m + 1) * t];
        let ph = &phi[m * t..(m + 1) * t];
        for i in 0..t {
            let a = th[i];
            if a == 0.0 {
                continue;
            }
            let row = &mut weights[i * t..(i + 1) * t];
            for (r, &p) in row.iter_mut().zip(ph) {
                *r += a * p;
            }
        }
    }
    for i in 0..t {
        let row = &mut weights[i * t..(i + 1) * t];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v * scale - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }

    // y[ch, i] = sum_j A[i, j] x[ch, j]
    let mut output = vec![0.0; c * t];
    for ch in 0..c {
        let x = &input[ch * t..(ch + 1) * t];
        let y = &mut output[ch * t..(ch + 1) * t];
        for i in 0..t {
            let row = &weights[i * t..(i + 1) * t];
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
    GnlmForward {
        output,
        theta,
        phi,
        weights,
    }
}

pub(crate) struct GnlmGrads {
    pub input: Vec<f64>,
    pub theta_w: Vec<f64>,
    pub phi_w: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gnlm_backward(
    grad_out: &[f64],
    input: &[f64],
    theta_w: &[f64],
    phi_w: &[f64],
    saved: &GnlmForward,
    c: usize,
    e: usize,
    t: usize,
) -> GnlmGrads {
    let scale = 1.0 / (c as f64).sqrt();
    let a = &saved.weights;
    let mut g_in = vec![0.0; c * t];

    // dA[i, j] = sum_ch dY[ch, i] x[ch, j];  dX[ch, j] += sum_i A[i, j] dY[ch, i]
    let mut g_a = vec![0.0; t * t];
    for ch in 0..c {
        let x = &input[ch * t..(ch + 1) * t];
        let gy = &grad_out[ch * t..(ch + 1) * t];
        let gx = &mut g_in[ch * t..(ch + 1) * t];
        for i in 0..t {
            let g = gy[i];
            if g == 0.0 {
                continue;
            }
            let ga_row = &mut g_a[i * t..(i + 1) * t];
            let a_row = &a[i * t..(i + 1) * t];
            for j in 0..t {
                ga_row[j] += g * x[j];
                gx[j] += g * a_row[j];
            }
        }
    }

    // softmax backward per row, folding in the 1/sqrt(d) logit scale
    let mut g_logit = vec![0.0; t * t];
    for i in 0..t {
        let a_row = &a[i * t..(i + 1) * t];
        let ga_row = &g_a[i * t..(i + 1) * t];
        let inner: f64 = a_row.iter().zip(ga_row).map(|(p, g)| p * g).sum();
        let gl = &mut g_logit[i * t..(i + 1) * t];
        for j in 0..t {
            gl[j] = a_row[j] * (ga_row[j] - inner) * scale;
        }
    }

    // S = thetaᵀ phi  =>  dTheta[m, i] = sum_j dS[i, j] phi[m, j], dPhi[m, j] = sum_i dS[i, j] theta[m, i]
    let mut g_theta = vec![0.0; e * t];
    let mut g_phi = vec![0.0; e * t];
    for m in 0..e {
        let th = &saved.theta[m * t..(m + 1) * t];
        let ph = &saved.phi[m * t..(m + 1) * t];
        let gth = &mut g_theta[m * t..(m + 1) * t];
        let gph = &mut g_phi[m * t..(m + 1) * t];
        for i in 0..t {
            let gl = &g_logit[i * t..(i + 1) * t];
            let mut acc = 0.0;
            for j in 0..t {
                acc += gl[j] * ph[j];
                gph[j] += gl[j] * th[i];
            }
            gth[i] = acc;
        }
    }

    // embedding = Wᵀ x  =>  dW[ch, m] = sum_t x[ch, t] dE[m, t], dX[ch, t] += sum_m W[ch, m] dE[m, t]
    let mut g_tw = vec![0.0; c * e];
    let mut g_pw = vec![0.0; c * e];
    for ch in 0..c {
        let x = &input[ch * t..(ch + 1) * t];
        for m in 0..e {
            let gth = &g_theta[m * t..(m + 1) * t];
            let gph = &g_phi[m * t..(m + 1) * t];
            g_tw[ch * e + m] = x.iter().zip(gth).map(|(a, b)| a * b).sum();
            g_pw[ch * e + m] = x.iter().zip(gph).map(|(a, b)| a * b).sum();
            let wt = theta_w[ch * e + m];
            let wp = phi_w[ch * e + m];
            let gx = &mut g_in[ch * t..(ch + 1) * t];
            for j in 0..t {
                gx[j] += wt * gth[j] + wp * gph[j];
            }
        }
    }

    GnlmGrads {
        input: g_in,
        theta_w: g_tw,
        phi_w: g_pw,
    }
}

/// Numerically stable log-softmax.
pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let top = crate::tensor::argmax(logits);
    let max = logits[top];
    // the max term contributes exactly 1; ln_1p keeps tiny remainders
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    let lse = max + rest.ln_1p();
    logits.iter().map(|&v| v - lse).collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / total).collect()
}
