//! Forward and backward passes for every operator the model needs.
//!
//! All batched signal tensors are laid out `[batch, channel, time]`
//! row-major. Each forward returns the output (plus whatever cache its
//! backward needs); each backward maps the gradient of a scalar loss w.r.t.
//! the output to gradients w.r.t. the inputs. Everything is verified against
//! central finite differences in the tests.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

fn dims3<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Shape(format!("{what} must be 3-dimensional, got {:?}", t.shape))),
    }
}

pub fn conv1d_out_len(l: usize, k: usize, stride: usize, padding: usize) -> usize {
    (l + 2 * padding - k) / stride + 1
}

/// 1D cross-correlation over a batch: x [B, Cin, L] * w [Cout, Cin, K] + b.
pub fn conv1d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let (batch, c_in, l) = dims3(x, "conv input")?;
    let (c_out, wc_in, k) = dims3(w, "conv kernel")?;
    if wc_in != c_in || b.shape != [c_out] {
        return Err(Error::Shape(format!(
            "conv shapes mismatch: x {:?} w {:?} b {:?}",
            x.shape, w.shape, b.shape
        )));
    }
    if k > l + 2 * padding || stride == 0 {
        return Err(Error::Shape(format!(
            "kernel {k} longer than padded input {} (stride {stride})",
            l + 2 * padding
        )));
    }
    let l_out = conv1d_out_len(l, k, stride, padding);
    let kc = c_in * k;
    let mut cols = vec![S::zero(); kc * l_out];
    let mut y = Tensor::zeros(&[batch, c_out, l_out]);
    for bi in 0..batch {
        im2col(&x.data[bi * c_in * l..(bi + 1) * c_in * l], c_in, l, k, stride, padding, l_out, &mut cols);
        let y_b = &mut y.data[bi * c_out * l_out..(bi + 1) * c_out * l_out];
        // y_b (c_out × l_out) = W (c_out × c_in·k) · cols (c_in·k × l_out)
        S::gemm(
            c_out, kc, l_out, S::one(), &w.data, kc as isize, 1, &cols, l_out as isize, 1,
            S::zero(), y_b, l_out as isize, 1,
        );
        for co in 0..c_out {
            let bias = b.data[co];
            for v in &mut y_b[co * l_out..(co + 1) * l_out] {
                *v += bias;
            }
        }
    }
    Ok(y)
}

/// Unfold one instance of a [c_in, l] signal into the (c_in·k) × l_out
/// patch matrix used by the gemm-based convolution; out-of-range (padding)
/// taps are zero.
fn im2col<S: Scalar>(
    x_b: &[S],
    c_in: usize,
    l: usize,
    k: usize,
    stride: usize,
    padding: usize,
    l_out: usize,
    cols: &mut [S],
) {
    for ci in 0..c_in {
        let x_row = &x_b[ci * l..(ci + 1) * l];
        for kk in 0..k {
            let row = &mut cols[(ci * k + kk) * l_out..(ci * k + kk + 1) * l_out];
            for (t, v) in row.iter_mut().enumerate() {
                let xi = t * stride + kk;
                *v = if xi >= padding && xi - padding < l { x_row[xi - padding] } else { S::zero() };
            }
        }
    }
}

/// Gradients of conv1d w.r.t. input, kernels and bias.
pub fn conv1d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    stride: usize,
    padding: usize,
    gy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (batch, c_in, l) = dims3(x, "conv input")?;
    let (c_out, _, k) = dims3(w, "conv kernel")?;
    let (_, _, l_out) = dims3(gy, "conv output gradient")?;
    let mut gx = Tensor::zeros(&x.shape);
    let mut gw = Tensor::zeros(&w.shape);
    let mut gb = Tensor::zeros(&[c_out]);
    let kc = c_in * k;
    let mut cols = vec![S::zero(); kc * l_out];
    let mut gcols = vec![S::zero(); kc * l_out];
    for bi in 0..batch {
        let gy_b = &gy.data[bi * c_out * l_out..(bi + 1) * c_out * l_out];
        for co in 0..c_out {
            gb.data[co] += gy_b[co * l_out..(co + 1) * l_out].iter().fold(S::zero(), |a, &v| a + v);
        }
        im2col(&x.data[bi * c_in * l..(bi + 1) * c_in * l], c_in, l, k, stride, padding, l_out, &mut cols);
        // gw (c_out × c_in·k) += gy_b (c_out × l_out) · colsᵀ (l_out × c_in·k)
        S::gemm(
            c_out, l_out, kc, S::one(), gy_b, l_out as isize, 1, &cols, 1, l_out as isize,
            S::one(), &mut gw.data, kc as isize, 1,
        );
        // gcols (c_in·k × l_out) = Wᵀ (c_in·k × c_out) · gy_b (c_out × l_out)
        S::gemm(
            kc, c_out, l_out, S::one(), &w.data, 1, kc as isize, gy_b, l_out as isize, 1,
            S::zero(), &mut gcols, l_out as isize, 1,
        );
        // fold the patch gradients back onto the (overlapping) input samples
        let gx_b = &mut gx.data[bi * c_in * l..(bi + 1) * c_in * l];
        for ci in 0..c_in {
            for kk in 0..k {
                let g_row = &gcols[(ci * k + kk) * l_out..(ci * k + kk + 1) * l_out];
                for (t, &g) in g_row.iter().enumerate() {
                    let xi = t * stride + kk;
                    if xi >= padding && xi - padding < l {
                        gx_b[ci * l + xi - padding] += g;
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Max pooling over time; ties go to the first index so backward is
/// deterministic. Returns the output and the flat argmax per output element.
pub fn maxpool1d_forward<S: Scalar>(
    x: &Tensor<S>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<S>, Vec<usize>)> {
    let (batch, c, l) = dims3(x, "maxpool input")?;
    if window == 0 || stride == 0 || l < window {
        return Err(Error::Shape(format!(
            "maxpool window {window}/stride {stride} invalid for length {l}"
        )));
    }
    let l_out = (l - window) / stride + 1;
    let mut y = Tensor::zeros(&[batch, c, l_out]);
    let mut argmax = vec![0usize; batch * c * l_out];
    for row in 0..batch * c {
        let x_row = &x.data[row * l..(row + 1) * l];
        for t in 0..l_out {
            let base = t * stride;
            let mut best = x_row[base];
            let mut best_i = base;
            for i in base + 1..base + window {
                if x_row[i] > best {
                    best = x_row[i];
                    best_i = i;
                }
            }
            y.data[row * l_out + t] = best;
            argmax[row * l_out + t] = row * l + best_i;
        }
    }
    Ok((y, argmax))
}

pub fn maxpool1d_backward<S: Scalar>(
    x_shape: &[usize],
    argmax: &[usize],
    gy: &Tensor<S>,
) -> Tensor<S> {
    let mut gx = Tensor::zeros(x_shape);
    for (i, &src) in argmax.iter().enumerate() {
        gx.data[src] += gy.data[i];
    }
    gx
}

pub const BATCHNORM_EPS: f64 = 1e-5;

/// Cache from a training-mode batchnorm forward.
pub struct BatchNormCache<S> {
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
    pub mean: Vec<S>,
}

/// Training-mode batch normalization over [B, C, L]: per-channel statistics
/// across batch and time, running stats updated with `momentum`.
pub fn batchnorm1d_train_forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &mut [S],
    running_var: &mut [S],
    momentum: f64,
) -> Result<(Tensor<S>, BatchNormCache<S>)> {
    let (batch, c, l) = dims3(x, "batchnorm input")?;
    if gamma.shape != [c] || beta.shape != [c] {
        return Err(Error::Shape(format!("batchnorm parameter shapes mismatch for {c} channels")));
    }
    let m = S::of_usize(batch * l);
    let eps = S::of(BATCHNORM_EPS);
    let mom = S::of(momentum);
    let one_m_mom = S::one() - mom;
    let mut y = Tensor::zeros(&x.shape);
    let mut cache = BatchNormCache {
        xhat: vec![S::zero(); x.len()],
        inv_std: vec![S::zero(); c],
        mean: vec![S::zero(); c],
    };
    for ch in 0..c {
        let mut sum = S::zero();
        let mut sumsq = S::zero();
        for bi in 0..batch {
            let row = &x.data[(bi * c + ch) * l..(bi * c + ch + 1) * l];
            for &v in row {
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / m;
        let var = (sumsq / m - mean * mean).max(S::zero());
        let inv_std = S::one() / (var + eps).sqrt();
        running_mean[ch] = one_m_mom * running_mean[ch] + mom * mean;
        running_var[ch] = one_m_mom * running_var[ch] + mom * var;
        cache.inv_std[ch] = inv_std;
        cache.mean[ch] = mean;
        let g = gamma.data[ch];
        let b = beta.data[ch];
        for bi in 0..batch {
            let off = (bi * c + ch) * l;
            for i in 0..l {
                let xh = (x.data[off + i] - mean) * inv_std;
                cache.xhat[off + i] = xh;
                y.data[off + i] = g * xh + b;
            }
        }
    }
    Ok((y, cache))
}

pub fn batchnorm1d_train_backward<S: Scalar>(
    x_shape: &[usize],
    gamma: &Tensor<S>,
    cache: &BatchNormCache<S>,
    gy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (batch, c, l) = (x_shape[0], x_shape[1], x_shape[2]);
    let m = S::of_usize(batch * l);
    let mut gx = Tensor::zeros(x_shape);
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_gy = S::zero();
        let mut sum_gy_xhat = S::zero();
        for bi in 0..batch {
            let off = (bi * c + ch) * l;
            for i in 0..l {
                let g = gy.data[off + i];
                sum_gy += g;
                sum_gy_xhat += g * cache.xhat[off + i];
            }
        }
        ggamma.data[ch] = sum_gy_xhat;
        gbeta.data[ch] = sum_gy;
        let scale = gamma.data[ch] * cache.inv_std[ch] / m;
        for bi in 0..batch {
            let off = (bi * c + ch) * l;
            for i in 0..l {
                gx.data[off + i] = scale
                    * (m * gy.data[off + i] - sum_gy - cache.xhat[off + i] * sum_gy_xhat);
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Evaluation-mode batch normalization using running statistics.
pub fn batchnorm1d_eval_forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &[S],
    running_var: &[S],
) -> Result<Tensor<S>> {
    let (batch, c, l) = dims3(x, "batchnorm input")?;
    let eps = S::of(BATCHNORM_EPS);
    let mut y = Tensor::zeros(&x.shape);
    for ch in 0..c {
        let inv_std = S::one() / (running_var[ch] + eps).sqrt();
        let g = gamma.data[ch];
        let b = beta.data[ch];
        let mean = running_mean[ch];
        for bi in 0..batch {
            let off = (bi * c + ch) * l;
            for i in 0..l {
                y.data[off + i] = g * (x.data[off + i] - mean) * inv_std + b;
            }
        }
    }
    Ok(y)
}

pub fn relu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut y = x.clone();
    y.grad = None;
    y.requires_grad = false;
    y.data.iter_mut().for_each(|v| {
        if *v < S::zero() {
            *v = S::zero();
        }
    });
    y
}

pub fn relu_backward<S: Scalar>(x: &Tensor<S>, gy: &Tensor<S>) -> Tensor<S> {
    let mut gx = Tensor::zeros(&x.shape);
    for i in 0..x.len() {
        if x.data[i] > S::zero() {
            gx.data[i] = gy.data[i];
        }
    }
    gx
}

/// Inverted dropout: keep with probability 1-p and scale by 1/(1-p) so that
/// evaluation mode is the identity. Returns the kept-mask for backward.
pub fn dropout_forward<S: Scalar>(
    x: &Tensor<S>,
    p: f64,
    rng: &mut impl Rng,
) -> (Tensor<S>, Vec<S>) {
    if p <= 0.0 {
        return (x.clone(), vec![S::one(); x.len()]);
    }
    let scale = S::of(1.0 / (1.0 - p));
    let mut y = Tensor::zeros(&x.shape);
    let mut mask = vec![S::zero(); x.len()];
    for i in 0..x.len() {
        if !rng.gen_bool(p) {
            mask[i] = scale;
            y.data[i] = x.data[i] * scale;
        }
    }
    (y, mask)
}

pub fn dropout_backward<S: Scalar>(mask: &[S], gy: &Tensor<S>) -> Tensor<S> {
    let mut gx = Tensor::zeros(&gy.shape);
    for i in 0..gy.len() {
        gx.data[i] = gy.data[i] * mask[i];
    }
    gx
}

/// Numerically stable softmax along the last axis.
pub fn softmax_last_axis<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let cols = *x.shape.last().expect("softmax needs at least one axis");
    let mut y = Tensor::zeros(&x.shape);
    for r in 0..x.len() / cols {
        let row = &x.data[r * cols..(r + 1) * cols];
        let max = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
        let mut sum = S::zero();
        for i in 0..cols {
            let e = (row[i] - max).exp();
            y.data[r * cols + i] = e;
            sum += e;
        }
        for i in 0..cols {
            y.data[r * cols + i] /= sum;
        }
    }
    y
}

/// Per-row cross-entropy from logits: -log softmax(logits)[target].
pub fn cross_entropy_rows<S: Scalar>(logits: &[S], cols: usize, targets: &[usize]) -> Vec<S> {
    let rows = logits.len() / cols;
    assert_eq!(rows, targets.len());
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
        let logsum = row.iter().map(|&v| (v - max).exp()).fold(S::zero(), |a, v| a + v).ln() + max;
        out.push(logsum - row[targets[r]]);
    }
    out
}

/// Gradient of summed row-wise cross-entropy w.r.t. the logits:
/// softmax(row) - onehot(target).
pub fn cross_entropy_rows_backward<S: Scalar>(logits: &[S], cols: usize, targets: &[usize]) -> Vec<S> {
    let rows = logits.len() / cols;
    let mut g = vec![S::zero(); logits.len()];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
        let mut sum = S::zero();
        for i in 0..cols {
            let e = (row[i] - max).exp();
            g[r * cols + i] = e;
            sum += e;
        }
        for i in 0..cols {
            g[r * cols + i] /= sum;
        }
        g[r * cols + targets[r]] -= S::one();
    }
    g
}

/// Huber-style smooth L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
pub fn smooth_l1<S: Scalar>(pred: S, target: S) -> S {
    let d = (pred - target).abs();
    if d < S::one() {
        S::of(0.5) * d * d
    } else {
        d - S::of(0.5)
    }
}

/// d/d pred of [`smooth_l1`].
pub fn smooth_l1_grad<S: Scalar>(pred: S, target: S) -> S {
    let d = pred - target;
    if d.abs() < S::one() {
        d
    } else if d > S::zero() {
        S::one()
    } else {
        -S::one()
    }
}
