//! Shared test oracles: straight-line loop implementations kept
//! independent of the library's kernels.

#![allow(dead_code)]
#![allow(clippy::too_many_arguments)]

use pi_trans::tensor::{Rng, Tensor};

pub fn randn(shape: &[usize], seed: u64, tag: &str) -> Tensor {
    Tensor::randn(shape, 0.0, 1.0, &mut Rng::new(seed, tag))
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f32, |m, (x, y)| m.max((x - y).abs()))
}

/// Six-loop direct convolution (NCHW, square kernel).
pub fn conv2d_oracle(
    x: &[f32],
    w: &[f32],
    bias: &[f32],
    b: usize,
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Vec<f32> {
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (wd + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0f32; b * c_out * ho * wo];
    for bi in 0..b {
        for oc in 0..c_out {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias[oc] as f64;
                    for ic in 0..c_in {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ih = (oh * stride + ki) as isize - padding as isize;
                                let iw = (ow * stride + kj) as isize - padding as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                let xv = x[((bi * c_in + ic) * h + ih as usize) * wd + iw as usize];
                                let wv = w[((oc * c_in + ic) * k + ki) * k + kj];
                                acc += (xv * wv) as f64;
                            }
                        }
                    }
                    out[((bi * c_out + oc) * ho + oh) * wo + ow] = acc as f32;
                }
            }
        }
    }
    out
}

/// Triple-loop batched matmul: (batch, m, k) × (batch, k, n).
pub fn matmul_oracle(a: &[f32], b: &[f32], batch: usize, m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; batch * m * n];
    for bi in 0..batch {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += (a[bi * m * k + i * k + p] * b[bi * k * n + p * n + j]) as f64;
                }
                out[bi * m * n + i * n + j] = acc as f32;
            }
        }
    }
    out
}

/// Quadratic-loop residual attention oracle for one batch element:
/// out[c][i] = v[c][i] + Σ_j softmax_row_i(qᵀk)[j] · v[c][j],
/// with q, k already projected to (c4, n) and v in (c, n).
pub fn attention_oracle(q: &[f32], k: &[f32], v: &[f32], c4: usize, c: usize, n: usize) -> Vec<f32> {
    // Scores s[i][j] = Σ_d q[d][i]·k[d][j].
    let mut scores = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0f64;
            for d in 0..c4 {
                acc += (q[d * n + i] * k[d * n + j]) as f64;
            }
            scores[i * n + j] = acc;
        }
    }
    // Row softmax.
    let mut attn = vec![0.0f64; n * n];
    for i in 0..n {
        let row = &scores[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0f64;
        for j in 0..n {
            let e = (row[j] - mx).exp();
            attn[i * n + j] = e;
            denom += e;
        }
        for j in 0..n {
            attn[i * n + j] /= denom;
        }
    }
    // Weighted sums plus residual.
    let mut out = vec![0.0f32; c * n];
    for ci in 0..c {
        for i in 0..n {
            let mut acc = v[ci * n + i] as f64;
            for j in 0..n {
                acc += attn[i * n + j] * v[ci * n + j] as f64;
            }
            out[ci * n + i] = acc as f32;
        }
    }
    out
}

/// Two-layer dense (y = W2·gelu(W1·x + b1) + b2) applied per column of a
/// (rows × d_in) matrix; weights are stored (in × out).
pub fn mlp2_oracle(
    x: &[f32],
    rows: usize,
    d_in: usize,
    w1: &[f32],
    b1: &[f32],
    hidden: usize,
    w2: &[f32],
    b2: &[f32],
    d_out: usize,
) -> Vec<f32> {
    fn gelu(v: f32) -> f32 {
        0.5 * v * (1.0 + (0.797_884_6_f32 * (v + 0.044_715 * v * v * v)).tanh())
    }
    let mut out = vec![0.0f32; rows * d_out];
    for r in 0..rows {
        let xin = &x[r * d_in..(r + 1) * d_in];
        let mut hid = vec![0.0f32; hidden];
        for (hj, hv) in hid.iter_mut().enumerate() {
            let mut acc = b1[hj] as f64;
            for (i, &xv) in xin.iter().enumerate() {
                acc += (xv * w1[i * hidden + hj]) as f64;
            }
            *hv = gelu(acc as f32);
        }
        for oj in 0..d_out {
            let mut acc = b2[oj] as f64;
            for (hj, &hv) in hid.iter().enumerate() {
                acc += (hv * w2[hj * d_out + oj]) as f64;
            }
            out[r * d_out + oj] = acc as f32;
        }
    }
    out
}
