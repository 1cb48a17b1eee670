//! Raw numeric kernels behind the tape ops.
//!
//! Everything here works on plain `&[f32]` buffers with explicit shapes.
//! Reductions that feed statistics (batch-norm moments, losses) accumulate
//! in f64; tensor storage stays f32 throughout.
//!
//! Parallel kernels only ever split disjoint output rows, and every output
//! element keeps a fixed serial reduction order, so results are
//! bit-identical for any thread setting.

use rayon::prelude::*;

use super::threads;

/// Work threshold (in multiply-adds) below which matmuls stay serial. Desk
/// kernels sit well under this; only full-scale convs and MLPs cross it.
const PAR_MIN_MACS: usize = 1 << 22;

/// C += A(m×k) · B(k×n). C must hold any desired initial value (bias, zeros).
pub fn mm(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let t = threads();
    if t > 1 && m * k * n >= PAR_MIN_MACS && m > 1 {
        let rows_per = m.div_ceil(t);
        c.par_chunks_mut(rows_per * n).enumerate().for_each(|(ci, chunk)| {
            let i0 = ci * rows_per;
            let rows = chunk.len() / n;
            mm_serial(&a[i0 * k..(i0 + rows) * k], b, chunk, rows, k, n);
        });
    } else {
        mm_serial(a, b, c, m, k, n);
    }
}

fn mm_serial(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A(m×n) · B(k×n)ᵀ, i.e. `C[i][p] += dot(A row i, B row p)`. C is m×k.
pub fn mm_abt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    let t = threads();
    if t > 1 && m * k * n >= PAR_MIN_MACS && m > 1 {
        let rows_per = m.div_ceil(t);
        c.par_chunks_mut(rows_per * k).enumerate().for_each(|(ci, chunk)| {
            let i0 = ci * rows_per;
            let rows = chunk.len() / k;
            mm_abt_serial(&a[i0 * n..(i0 + rows) * n], b, chunk, rows, n, k);
        });
    } else {
        mm_abt_serial(a, b, c, m, n, k);
    }
}

fn mm_abt_serial(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (p, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0f32;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// C += A(m×k)ᵀ · B(m×n). C is k×n.
pub fn mm_atb(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let t = threads();
    if t > 1 && m * k * n >= PAR_MIN_MACS && k > 1 {
        let rows_per = k.div_ceil(t);
        c.par_chunks_mut(rows_per * n).enumerate().for_each(|(ci, chunk)| {
            let p0 = ci * rows_per;
            for i in 0..m {
                let b_row = &b[i * n..(i + 1) * n];
                for (pr, c_row) in chunk.chunks_mut(n).enumerate() {
                    let av = a[i * k + p0 + pr];
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv += av * bv;
                    }
                }
            }
        });
    } else {
        for i in 0..m {
            let b_row = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                let c_row = &mut c[p * n..(p + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Unfolds one image (c×h×w) into a (c·k·k) × (ho·wo) patch matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    cols: &mut [f32],
) {
    let ho = conv_out_dim(h, k, stride, padding);
    let wo = conv_out_dim(w, k, stride, padding);
    debug_assert_eq!(cols.len(), c * k * k * ho * wo);
    cols.fill(0.0);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ci * k + ki) * k + kj) * ho * wo..][..ho * wo];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    let dst = &mut row[oh * wo..(oh + 1) * wo];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * stride + kj) as isize - padding as isize;
                        if iw >= 0 && iw < w as isize {
                            *d = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back into an image; inverse map of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    x: &mut [f32],
) {
    let ho = conv_out_dim(h, k, stride, padding);
    let wo = conv_out_dim(w, k, stride, padding);
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * ho * wo..][..ho * wo];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let src = &row[oh * wo..(oh + 1) * wo];
                    for (ow, &s) in src.iter().enumerate() {
                        let iw = (ow * stride + kj) as isize - padding as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Batched conv2d forward via im2col + matmul.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f32],
    weight: &[f32],
    bias: &[f32],
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<f32> {
    let ho = conv_out_dim(h, k, stride, padding);
    let wo = conv_out_dim(w, k, stride, padding);
    let kk = c_in * k * k;
    let sites = ho * wo;
    let mut out = vec![0.0f32; b * c_out * sites];
    let mut cols = vec![0.0f32; kk * sites];
    for bi in 0..b {
        im2col(&x[bi * c_in * h * w..], c_in, h, w, k, stride, padding, &mut cols);
        let out_b = &mut out[bi * c_out * sites..(bi + 1) * c_out * sites];
        for (oc, chunk) in out_b.chunks_mut(sites).enumerate() {
            chunk.fill(bias[oc]);
        }
        mm(weight, &cols, out_b, c_out, kk, sites);
    }
    out
}

/// Optional (dx, dw, db) gradient buffers of a conv2d.
pub type ConvGrads = (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>);

/// Gradients of conv2d. Any of the three outputs can be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32],
    weight: &[f32],
    dout: &[f32],
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads {
    let ho = conv_out_dim(h, k, stride, padding);
    let wo = conv_out_dim(w, k, stride, padding);
    let kk = c_in * k * k;
    let sites = ho * wo;

    let mut dx = want_dx.then(|| vec![0.0f32; b * c_in * h * w]);
    let mut dw = want_dw.then(|| vec![0.0f32; c_out * kk]);
    let mut db = want_db.then(|| vec![0.0f32; c_out]);

    let mut cols = vec![0.0f32; kk * sites];
    let mut dcols = vec![0.0f32; kk * sites];
    for bi in 0..b {
        let dout_b = &dout[bi * c_out * sites..(bi + 1) * c_out * sites];
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in dout_b.chunks(sites).enumerate() {
                let mut acc = 0.0f64;
                for &v in chunk {
                    acc += v as f64;
                }
                db[oc] += acc as f32;
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x[bi * c_in * h * w..], c_in, h, w, k, stride, padding, &mut cols);
            mm_abt(dout_b, &cols, dw, c_out, sites, kk);
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(0.0);
            mm_atb(weight, dout_b, &mut dcols, c_out, kk, sites);
            col2im_add(
                &dcols,
                c_in,
                h,
                w,
                k,
                stride,
                padding,
                &mut dx[bi * c_in * h * w..(bi + 1) * c_in * h * w],
            );
        }
    }
    (dx, dw, db)
}

/// Numerically-stable softmax along `axis`, described by (outer, len, inner)
/// strides of the flattened buffer.
pub fn softmax_forward(x: &[f32], outer: usize, len: usize, inner: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f32::NEG_INFINITY;
            for l in 0..len {
                mx = mx.max(x[base + l * inner]);
            }
            let mut denom = 0.0f64;
            for l in 0..len {
                let e = (x[base + l * inner] - mx).exp();
                y[base + l * inner] = e;
                denom += e as f64;
            }
            let inv = (1.0 / denom) as f32;
            for l in 0..len {
                y[base + l * inner] *= inv;
            }
        }
    }
    y
}

/// dx = y ⊙ (dy − Σ_axis dy⊙y).
pub fn softmax_backward(y: &[f32], dy: &[f32], outer: usize, len: usize, inner: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0f64;
            for l in 0..len {
                let idx = base + l * inner;
                dot += (dy[idx] * y[idx]) as f64;
            }
            let dot = dot as f32;
            for l in 0..len {
                let idx = base + l * inner;
                dx[idx] = y[idx] * (dy[idx] - dot);
            }
        }
    }
    dx
}

pub const GELU_COEF: f32 = 0.044_715;
pub const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// Tanh-approximation GELU: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Per-channel moments over (batch, spatial) of an NCHW buffer; f64 sums.
pub fn channel_moments(x: &[f32], b: usize, c: usize, hw: usize) -> (Vec<f32>, Vec<f32>) {
    let n = (b * hw) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ci in 0..c {
        let mut sum = 0.0f64;
        for bi in 0..b {
            let plane = &x[(bi * c + ci) * hw..][..hw];
            for &v in plane {
                sum += v as f64;
            }
        }
        let m = sum / n;
        let mut sq = 0.0f64;
        for bi in 0..b {
            let plane = &x[(bi * c + ci) * hw..][..hw];
            for &v in plane {
                let d = v as f64 - m;
                sq += d * d;
            }
        }
        mean[ci] = m as f32;
        var[ci] = (sq / n) as f32;
    }
    (mean, var)
}

pub struct BnTrainOut {
    pub y: Vec<f32>,
    pub xhat: Vec<f32>,
    pub invstd: Vec<f32>,
    pub mean: Vec<f32>,
    /// Biased (1/N) batch variance.
    pub var: Vec<f32>,
}

pub fn batchnorm_train_forward(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    b: usize,
    c: usize,
    hw: usize,
    eps: f32,
) -> BnTrainOut {
    let (mean, var) = channel_moments(x, b, c, hw);
    let invstd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let (m, is, g, be) = (mean[ci], invstd[ci], gamma[ci], beta[ci]);
            for j in 0..hw {
                let xh = (x[base + j] - m) * is;
                xhat[base + j] = xh;
                y[base + j] = g * xh + be;
            }
        }
    }
    BnTrainOut { y, xhat, invstd, mean, var }
}

/// Train-mode batch-norm backward: gradients flow through the batch moments.
pub fn batchnorm_train_backward(
    xhat: &[f32],
    invstd: &[f32],
    gamma: &[f32],
    dy: &[f32],
    b: usize,
    c: usize,
    hw: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let n = (b * hw) as f64;
    let mut dx = vec![0.0f32; dy.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ci in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for j in 0..hw {
                let d = dy[base + j] as f64;
                sum_dy += d;
                sum_dy_xhat += d * xhat[base + j] as f64;
            }
        }
        dgamma[ci] = sum_dy_xhat as f32;
        dbeta[ci] = sum_dy as f32;
        let g_is_over_n = (gamma[ci] * invstd[ci]) as f64 / n;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for j in 0..hw {
                let term = n * dy[base + j] as f64
                    - sum_dy
                    - xhat[base + j] as f64 * sum_dy_xhat;
                dx[base + j] = (g_is_over_n * term) as f32;
            }
        }
    }
    (dx, dgamma, dbeta)
}
