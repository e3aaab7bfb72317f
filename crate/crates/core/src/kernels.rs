//! Differentiable numeric primitives.
//!
//! Each primitive comes as a pure forward function and a matching backward
//! function that maps the output adjoint to input adjoints. The tape in
//! [`crate::tape`] strings them together; the `Tensor`-level wrappers at the
//! bottom of this file are the checked public surface.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer-normalization epsilon, fixed across the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Runs `f` with AVX2 code generation when the CPU supports it.
///
/// Rust never contracts a multiply and an add into a fused instruction on
/// its own, so both paths round identically and results do not depend on
/// the machine.
#[inline(always)]
fn simd<T>(f: impl FnOnce() -> T) -> T {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx2")]
        fn avx2<T>(f: impl FnOnce() -> T) -> T {
            f()
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected on the running CPU.
            return unsafe { avx2(f) };
        }
    }
    f()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators let the loop vectorize while keeping a
    // fixed summation order.
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[r, k] = sum_j w[k, j] * x[r, j] + b[k]` for `x: [rows, d_in]`, `w: [d_out, d_in]`.
///
/// Each output is the [`dot`] of a weight row with an input row; four
/// weight rows are processed together so each input chunk is loaded once.
pub fn linear_forward(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    d_in: usize,
    d_out: usize,
) -> Vec<f64> {
    simd(|| {
        let rows = x.len() / d_in;
        let mut y = vec![0.0; rows * d_out];
        let blocked = d_out / 4 * 4;
        for r in 0..rows {
            let xr = &x[r * d_in..(r + 1) * d_in];
            let yr = &mut y[r * d_out..(r + 1) * d_out];
            for k in (0..blocked).step_by(4) {
                let out = dot4(&w[k * d_in..(k + 4) * d_in], xr);
                yr[k..k + 4].copy_from_slice(&out);
            }
            for k in blocked..d_out {
                yr[k] = dot(&w[k * d_in..(k + 1) * d_in], xr);
            }
            if let Some(b) = b {
                for (v, bk) in yr.iter_mut().zip(b) {
                    *v += bk;
                }
            }
        }
        y
    })
}

/// [`dot`] of each of the four consecutive rows of `w4` with `x`, with the
/// same per-row summation order.
#[inline]
fn dot4(w4: &[f64], x: &[f64]) -> [f64; 4] {
    let d = x.len();
    let (w0, rest) = w4.split_at(d);
    let (w1, rest) = rest.split_at(d);
    let (w2, w3) = rest.split_at(d);
    let mut acc = [[0.0f64; 4]; 4];
    let chunks = d / 4 * 4;
    for j in (0..chunks).step_by(4) {
        let xs: [f64; 4] = x[j..j + 4].try_into().unwrap();
        for (a, w) in acc.iter_mut().zip([w0, w1, w2, w3]) {
            let ws: [f64; 4] = w[j..j + 4].try_into().unwrap();
            for l in 0..4 {
                a[l] += ws[l] * xs[l];
            }
        }
    }
    let mut out = [0.0; 4];
    for ((o, a), w) in out.iter_mut().zip(&acc).zip([w0, w1, w2, w3]) {
        let mut tail = 0.0;
        for j in chunks..d {
            tail += w[j] * x[j];
        }
        *o = (a[0] + a[1]) + (a[2] + a[3]) + tail;
    }
    out
}

/// Input, weight and bias adjoints of [`linear_forward`]; the weight and bias
/// adjoints are accumulated into `dw` / `db`.
pub fn linear_backward(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    d_in: usize,
    d_out: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Vec<f64> {
    let rows = x.len() / d_in;
    let mut dx = vec![0.0; rows * d_in];
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let dyr = &dy[r * d_out..(r + 1) * d_out];
        let dxr = &mut dx[r * d_in..(r + 1) * d_in];
        for k in 0..d_out {
            let g = dyr[k];
            if g == 0.0 {
                continue;
            }
            axpy(g, &w[k * d_in..(k + 1) * d_in], dxr);
            axpy(g, xr, &mut dw[k * d_in..(k + 1) * d_in]);
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            for (acc, g) in db.iter_mut().zip(&dy[r * d_out..(r + 1) * d_out]) {
                *acc += g;
            }
        }
    }
    dx
}

/// Like [`linear_backward`] but only the input adjoint.
pub fn linear_backward_input(
    dy: &[f64],
    w: &[f64],
    rows: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<f64> {
    simd(|| {
        let mut dx = vec![0.0; rows * d_in];
        for r in 0..rows {
            let dyr = &dy[r * d_out..(r + 1) * d_out];
            let dxr = &mut dx[r * d_in..(r + 1) * d_in];
            for k in 0..d_out {
                if dyr[k] != 0.0 {
                    axpy(dyr[k], &w[k * d_in..(k + 1) * d_in], dxr);
                }
            }
        }
        dx
    })
}

/// Weight adjoint only, accumulated into `dw`.
pub fn linear_backward_weight(dy: &[f64], x: &[f64], d_in: usize, d_out: usize, dw: &mut [f64]) {
    simd(|| {
        let rows = x.len() / d_in;
        for r in 0..rows {
            let xr = &x[r * d_in..(r + 1) * d_in];
            for k in 0..d_out {
                let g = dy[r * d_out + k];
                if g != 0.0 {
                    axpy(g, xr, &mut dw[k * d_in..(k + 1) * d_in]);
                }
            }
        }
    })
}

/// `c = a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `c = a · b` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], ci);
            }
        }
    }
    c
}

/// `c = aᵀ · b` for `a: [k, m]`, `b: [k, n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let bp = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api != 0.0 {
                axpy(api, bp, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
    c
}

/// Row-wise softmax with max subtraction.
pub fn softmax_forward(x: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (yi, xi) in yr.iter_mut().zip(xr) {
            *yi = (xi - max).exp();
            sum += *yi;
        }
        let inv = 1.0 / sum;
        for yi in yr.iter_mut() {
            *yi *= inv;
        }
    }
    y
}

pub fn softmax_backward(dy: &[f64], y: &[f64], n: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((dyr, yr), dxr) in dy
        .chunks_exact(n)
        .zip(y.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let inner: f64 = dyr.iter().zip(yr).map(|(a, b)| a * b).sum();
        for ((d, g), p) in dxr.iter_mut().zip(dyr).zip(yr) {
            *d = p * (g - inner);
        }
    }
    dx
}

/// Values saved by [`layer_norm_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    d: usize,
) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = rs;
        for j in 0..d {
            let n = (xr[j] - mean) * rs;
            normalized[r * d + j] = n;
            y[r * d + j] = n * gain[j] + bias[j];
        }
    }
    (
        y,
        LayerNormCache {
            normalized,
            inv_std,
        },
    )
}

/// Input adjoint of layer normalization; gain and bias adjoints are
/// accumulated into `dgain` / `dbias` when given.
pub fn layer_norm_backward(
    dy: &[f64],
    gain: &[f64],
    cache: &LayerNormCache,
    d: usize,
    mut dgain: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dn = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let nr = &cache.normalized[r * d..(r + 1) * d];
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..d {
                dg[j] += dyr[j] * nr[j];
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for j in 0..d {
                db[j] += dyr[j];
            }
        }
        for j in 0..d {
            dn[j] = dyr[j] * gain[j];
        }
        let mean_dn = dn.iter().sum::<f64>() / d as f64;
        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rs = cache.inv_std[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dn[j] - mean_dn - nr[j] * mean_dn_n);
        }
    }
    dx
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn check_matrix(name: &str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "{name} must be a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Checked `x · Wᵀ + b` over the trailing axis of `x`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    check_matrix("weight", w)?;
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    if x.cols() != d_in {
        return Err(Error::Dimension(format!(
            "input trailing dim {} does not match weight {:?}",
            x.cols(),
            w.shape()
        )));
    }
    if let Some(b) = b {
        if b.len() != d_out {
            return Err(Error::Dimension(format!(
                "bias of {} values does not match weight {:?}",
                b.len(),
                w.shape()
            )));
        }
    }
    let y = linear_forward(x.data(), w.data(), b.map(Tensor::data), d_in, d_out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = d_out;
    Tensor::new(shape, y)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let n = x.cols();
    if n == 0 {
        return Err(Error::Dimension("softmax over an empty axis".into()));
    }
    Tensor::new(x.shape().to_vec(), softmax_forward(x.data(), n))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::Dimension(
            "layer norm needs at least 2 features".into(),
        ));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::Dimension(format!(
            "layer norm gain/bias of {}/{} values for {} features",
            gain.len(),
            bias.len(),
            d
        )));
    }
    let (y, _) = layer_norm_forward(x.data(), gain.data(), bias.data(), d);
    Tensor::new(x.shape().to_vec(), y)
}

pub fn activation(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}
