//! Layer primitives for the dual encoder: layer norm, linear, GELU, and
//! row softmax, each with an explicit backward pass. All tensors are flat
//! row-major slices with dimensions passed alongside; every backward
//! accumulates (`+=`) into its gradient outputs so call sites control
//! zeroing.

use crate::clip::backend::Real;

pub const LN_EPS: f64 = 1e-5;

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per row of the m x w
/// matrix. Saves per-row mean and reciprocal std for the backward pass.
pub fn layer_norm_forward<T: Real>(
    x: &[T],
    m: usize,
    w: usize,
    gamma: &[T],
    beta: &[T],
    y: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
) {
    let inv_w = T::from_f64(1.0 / w as f64);
    let eps = T::from_f64(LN_EPS);
    for r in 0..m {
        let row = &x[r * w..(r + 1) * w];
        let mut mu = T::zero();
        for &v in row {
            mu = mu + v;
        }
        mu = mu * inv_w;
        let mut var = T::zero();
        for &v in row {
            let d = v - mu;
            var = var + d * d;
        }
        var = var * inv_w;
        let rs = (var + eps).sqrt().recip();
        mean[r] = mu;
        rstd[r] = rs;
        let out = &mut y[r * w..(r + 1) * w];
        for c in 0..w {
            out[c] = gamma[c] * ((row[c] - mu) * rs) + beta[c];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    x: &[T],
    m: usize,
    w: usize,
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let inv_w = T::from_f64(1.0 / w as f64);
    for r in 0..m {
        let row = &x[r * w..(r + 1) * w];
        let drow = &dy[r * w..(r + 1) * w];
        let (mu, rs) = (mean[r], rstd[r]);
        // g = dy * gamma; dx = rstd * (g - mean(g) - xhat * mean(g*xhat))
        let mut g_mean = T::zero();
        let mut gx_mean = T::zero();
        for c in 0..w {
            let xhat = (row[c] - mu) * rs;
            let g = drow[c] * gamma[c];
            g_mean = g_mean + g;
            gx_mean = gx_mean + g * xhat;
            dgamma[c] = dgamma[c] + drow[c] * xhat;
            dbeta[c] = dbeta[c] + drow[c];
        }
        g_mean = g_mean * inv_w;
        gx_mean = gx_mean * inv_w;
        let out = &mut dx[r * w..(r + 1) * w];
        for c in 0..w {
            let xhat = (row[c] - mu) * rs;
            let g = drow[c] * gamma[c];
            out[c] = out[c] + rs * (g - g_mean - xhat * gx_mean);
        }
    }
}

/// y = x @ W^T (+ b). x is m x k, W is n x k (one output unit per row),
/// y is m x n.
pub fn linear_forward<T: Real>(
    x: &[T],
    m: usize,
    k: usize,
    n: usize,
    w: &[T],
    b: Option<&[T]>,
    y: &mut [T],
) {
    T::gemm(false, true, m, n, k, T::one(), x, k, w, k, T::zero(), y, n);
    if let Some(bias) = b {
        for r in 0..m {
            let row = &mut y[r * n..(r + 1) * n];
            for c in 0..n {
                row[c] = row[c] + bias[c];
            }
        }
    }
}

/// Backward of [`linear_forward`]: dx += dy @ W, dW += dy^T @ x,
/// db += column sums of dy.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    dy: &[T],
    m: usize,
    k: usize,
    n: usize,
    w: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        T::gemm(false, false, m, k, n, T::one(), dy, n, w, k, T::one(), dx, k);
    }
    T::gemm(true, false, n, k, m, T::one(), dy, n, x, k, T::one(), dw, k);
    if let Some(db) = db {
        for r in 0..m {
            let row = &dy[r * n..(r + 1) * n];
            for c in 0..n {
                db[c] = db[c] + row[c];
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximate GELU, elementwise.
pub fn gelu_forward<T: Real>(x: &[T], y: &mut [T]) {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    for (out, &v) in y.iter_mut().zip(x) {
        let inner = c * (v + a * v * v * v);
        *out = half * v * (T::one() + inner.tanh());
    }
}

/// dx += dy * gelu'(x).
pub fn gelu_backward<T: Real>(x: &[T], dy: &[T], dx: &mut [T]) {
    let c = T::from_f64(GELU_C);
    let a3 = T::from_f64(3.0 * GELU_A);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    for i in 0..x.len() {
        let v = x[i];
        let inner = c * (v + a * v * v * v);
        let t = inner.tanh();
        let sech2 = T::one() - t * t;
        let d_inner = c * (T::one() + a3 * v * v);
        let grad = half * (T::one() + t) + half * v * sech2 * d_inner;
        dx[i] = dx[i] + dy[i] * grad;
    }
}

/// In-place numerically stable softmax over each row. When `causal`,
/// entry (i, j) with j > i is masked out (rows attend only to earlier
/// columns — rows and columns must then be the same sequence length).
pub fn softmax_rows<T: Real>(s: &mut [T], rows: usize, cols: usize, causal: bool) {
    for r in 0..rows {
        let row = &mut s[r * cols..(r + 1) * cols];
        let valid = if causal { r + 1 } else { cols };
        let mut max = T::neg_infinity();
        for &v in &row[..valid] {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row[..valid].iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = sum.recip();
        for v in row[..valid].iter_mut() {
            *v = *v * inv;
        }
        for v in row[valid..].iter_mut() {
            *v = T::zero();
        }
    }
}

/// Backward of row softmax: ds += P * (dP - rowdot(dP, P)). Masked
/// entries have P = 0 and therefore contribute nothing.
pub fn softmax_backward_rows<T: Real>(p: &[T], dp: &[T], rows: usize, cols: usize, ds: &mut [T]) {
    for r in 0..rows {
        let prow = &p[r * cols..(r + 1) * cols];
        let dprow = &dp[r * cols..(r + 1) * cols];
        let mut dot = T::zero();
        for c in 0..cols {
            dot = dot + prow[c] * dprow[c];
        }
        let out = &mut ds[r * cols..(r + 1) * cols];
        for c in 0..cols {
            out[c] = out[c] + prow[c] * (dprow[c] - dot);
        }
    }
}

/// L2-normalize each row in place; returns per-row original norms.
/// Zero rows are left untouched and report a zero norm.
pub fn normalize_rows_inplace<T: Real>(x: &mut [T], m: usize, d: usize) -> Vec<T> {
    let mut norms = Vec::with_capacity(m);
    for r in 0..m {
        let row = &mut x[r * d..(r + 1) * d];
        let mut sq = T::zero();
        for &v in row.iter() {
            sq = sq + v * v;
        }
        let norm = sq.sqrt();
        if norm > T::zero() {
            let inv = norm.recip();
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        norms.push(norm);
    }
    norms
}

/// Backward of row normalization: given dy w.r.t. x_hat = x / ||x||,
/// dx += (dy - x_hat * (x_hat . dy)) / ||x||. `x_hat` is the normalized
/// output saved from the forward pass.
pub fn normalize_rows_backward<T: Real>(
    x_hat: &[T],
    norms: &[T],
    dy: &[T],
    m: usize,
    d: usize,
    dx: &mut [T],
) {
    for r in 0..m {
        let h = &x_hat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        let mut dot = T::zero();
        for c in 0..d {
            dot = dot + h[c] * g[c];
        }
        let inv = norms[r].recip();
        let out = &mut dx[r * d..(r + 1) * d];
        for c in 0..d {
            out[c] = out[c] + (g[c] - h[c] * dot) * inv;
        }
    }
}
