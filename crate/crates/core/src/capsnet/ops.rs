//! Float reference operators.

use rayon::prelude::*;

use super::config::CapsConvSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight layout `[kh, kw, cin, cout]`, cout innermost.
#[inline]
pub fn weight_index(ky: usize, kx: usize, ci: usize, co: usize, kw: usize, cin: usize, cout: usize) -> usize {
    ((ky * kw + kx) * cin + ci) * cout + co
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.dims() {
        [a, b, c] => Ok((*a, *b, *c)),
        d => Err(Error::ShapeMismatch(format!("{what}: expected 3-D tensor, got {d:?}"))),
    }
}

/// Same-padded, stride-1 cross-correlation. Bias is added before the
/// optional ReLU. Accumulates in f64.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, relu: bool) -> Result<Tensor> {
    let (rows, cols, cin) = dims3(input, "conv input")?;
    let (kh, kw, wcin, cout) = match weights.dims() {
        [a, b, c, d] => (*a, *b, *c, *d),
        d => return Err(Error::ShapeMismatch(format!("conv weights must be 4-D, got {d:?}"))),
    };
    if wcin != cin {
        return Err(Error::ShapeMismatch(format!("conv weights expect {wcin} input channels, input has {cin}")));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::ShapeMismatch(format!("kernel {kh}x{kw} must be odd")));
    }
    let x = input.as_f32().ok_or_else(|| Error::InvalidTensor("conv input must be float32".into()))?;
    let w = weights.as_f32().ok_or_else(|| Error::InvalidTensor("conv weights must be float32".into()))?;
    let b = bias.expect_f32("conv bias", &[cout])?;
    let out = conv2d_raw(x, rows, cols, cin, w, kh, kw, cout, b, relu);
    Tensor::from_f32(vec![rows, cols, cout], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_raw(
    x: &[f32],
    rows: usize,
    cols: usize,
    cin: usize,
    w: &[f32],
    kh: usize,
    kw: usize,
    cout: usize,
    bias: &[f32],
    relu: bool,
) -> Vec<f32> {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = vec![0.0f32; rows * cols * cout];
    out.par_chunks_mut(cols * cout).enumerate().for_each(|(r, row_out)| {
        let mut acc = vec![0.0f64; cout];
        for c in 0..cols {
            acc.iter_mut().zip(bias).for_each(|(a, &b)| *a = b as f64);
            for ky in 0..kh {
                let Some(ir) = (r + ky).checked_sub(ph).filter(|&v| v < rows) else { continue };
                for kx in 0..kw {
                    let Some(ic) = (c + kx).checked_sub(pw).filter(|&v| v < cols) else { continue };
                    let px = &x[(ir * cols + ic) * cin..(ir * cols + ic + 1) * cin];
                    for (ci, &xv) in px.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let xv = xv as f64;
                        let wrow = &w[weight_index(ky, kx, ci, 0, kw, cin, cout)..][..cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv as f64;
                        }
                    }
                }
            }
            let dst = &mut row_out[c * cout..(c + 1) * cout];
            for (d, &a) in dst.iter_mut().zip(&acc) {
                *d = if relu && a < 0.0 { 0.0 } else { a as f32 };
            }
        }
    });
    out
}

/// Pointwise fully connected layer over the last axis: weights `[in, out]`.
pub(crate) fn dense_raw(x: &[f32], n_in: usize, w: &[f32], n_out: usize, bias: &[f32], relu: bool) -> Vec<f32> {
    let pixels = x.len() / n_in;
    let mut out = vec![0.0f32; pixels * n_out];
    out.par_chunks_mut(n_out).enumerate().for_each(|(p, dst)| {
        let src = &x[p * n_in..(p + 1) * n_in];
        let mut acc: Vec<f64> = bias.iter().map(|&b| b as f64).collect();
        for (i, &xv) in src.iter().enumerate() {
            let wrow = &w[i * n_out..(i + 1) * n_out];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xv as f64 * wv as f64;
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = if relu && a < 0.0 { 0.0 } else { a as f32 };
        }
    });
    out
}

/// v = |s|^2 / (1 + |s|^2) * s / |s|, with v = 0 at s = 0.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    if n2 == 0.0 {
        return vec![0.0; s.len()];
    }
    let k = n2 / (1.0 + n2) / n2.sqrt();
    s.iter().map(|x| x * k).collect()
}

/// Softmax over the output-capsule axis of `b[n_in][n_out]`, stabilized by
/// subtracting each row's max.
pub fn routing_softmax(b: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    assert_eq!(b.len(), n_in * n_out, "logit shape");
    let mut c = vec![0.0; b.len()];
    for i in 0..n_in {
        let row = &b[i * n_out..(i + 1) * n_out];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut c[i * n_out..(i + 1) * n_out];
        let mut sum = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    c
}

/// Routing trace: the final logits and couplings, the predictions and the
/// output capsules, plus the coupling matrix used in every iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    pub n_in: usize,
    pub n_out: usize,
    pub dim: usize,
    pub logits_b: Vec<f64>,
    pub coupling_c: Vec<f64>,
    pub prediction_u_hat: Vec<f64>,
    pub output_v: Vec<f64>,
    pub coupling_history: Vec<Vec<f64>>,
}

/// Routing-by-agreement over predictions `u_hat[n_in][n_out][dim]`.
///
/// Logits start at zero. Each iteration computes couplings, the weighted
/// sum per output capsule and its squash; the agreement update of the
/// logits is skipped after the last iteration since it cannot change `v`.
pub fn route(u_hat: &[f64], n_in: usize, n_out: usize, dim: usize, iterations: usize) -> Result<RoutingState> {
    if u_hat.len() != n_in * n_out * dim || n_in == 0 || n_out == 0 || dim == 0 {
        return Err(Error::ShapeMismatch(format!("u_hat has {} values, expected {n_in}x{n_out}x{dim}", u_hat.len())));
    }
    if iterations == 0 {
        return Err(Error::InvalidConfig("routing needs at least one iteration".into()));
    }
    let mut b = vec![0.0; n_in * n_out];
    let mut c = Vec::new();
    let mut v = vec![0.0; n_out * dim];
    let mut history = Vec::with_capacity(iterations);
    for it in 0..iterations {
        c = routing_softmax(&b, n_in, n_out);
        for j in 0..n_out {
            let mut s = vec![0.0; dim];
            for i in 0..n_in {
                let cij = c[i * n_out + j];
                let u = &u_hat[(i * n_out + j) * dim..][..dim];
                s.iter_mut().zip(u).for_each(|(a, &x)| *a += cij * x);
            }
            v[j * dim..(j + 1) * dim].copy_from_slice(&squash(&s));
        }
        history.push(c.clone());
        if it + 1 < iterations {
            for i in 0..n_in {
                for j in 0..n_out {
                    let u = &u_hat[(i * n_out + j) * dim..][..dim];
                    let vj = &v[j * dim..(j + 1) * dim];
                    b[i * n_out + j] += u.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
    Ok(RoutingState {
        n_in,
        n_out,
        dim,
        logits_b: b,
        coupling_c: c,
        prediction_u_hat: u_hat.to_vec(),
        output_v: v,
        coupling_history: history,
    })
}

/// Tensor form of [`route`]: `u_hat` is `[n_in, n_out, dim]`, the result
/// `[n_out, dim]`.
pub fn dynamic_routing(u_hat: &Tensor, num_iterations: usize) -> Result<Tensor> {
    let (n_in, n_out, dim) = dims3(u_hat, "u_hat")?;
    let u: Vec<f64> = u_hat.to_f32_vec().iter().map(|&x| x as f64).collect();
    let st = route(&u, n_in, n_out, dim, num_iterations)?;
    Tensor::from_f32(vec![n_out, dim], st.output_v.iter().map(|&x| x as f32).collect())
}

/// Broadcasts each input capsule over every output capsule, the prediction
/// form used when routing carries no trained transforms.
pub fn broadcast_predictions<T: Copy>(caps: &[T], n_in: usize, n_out: usize, dim: usize) -> Vec<T> {
    let mut u = Vec::with_capacity(n_in * n_out * dim);
    for i in 0..n_in {
        let cap = &caps[i * dim..(i + 1) * dim];
        for _ in 0..n_out {
            u.extend_from_slice(cap);
        }
    }
    u
}

pub(crate) fn squash_capsules_f32(data: &mut [f32], capsule_dim: usize) {
    data.par_chunks_mut(capsule_dim).for_each(|cap| {
        let s: Vec<f64> = cap.iter().map(|&x| x as f64).collect();
        for (d, v) in cap.iter_mut().zip(squash(&s)) {
            *d = v as f32;
        }
    });
}

/// Convolution without ReLU followed by a per-pixel squash of every capsule.
pub fn caps_conv_layer(input: &Tensor, spec: &CapsConvSpec, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if spec.num_capsules * spec.capsule_dim != spec.out_ch {
        return Err(Error::ShapeMismatch(format!(
            "{} capsules x {} dims != {} channels",
            spec.num_capsules, spec.capsule_dim, spec.out_ch
        )));
    }
    let want = [spec.kernel_h, spec.kernel_w, spec.in_ch, spec.out_ch];
    if weights.dims() != want {
        return Err(Error::ShapeMismatch(format!("capsule weights {:?}, expected {want:?}", weights.dims())));
    }
    let mut out = conv2d(input, weights, bias, false)?;
    squash_capsules_f32(out.as_f32_mut().expect("float output"), spec.capsule_dim);
    Ok(out)
}
