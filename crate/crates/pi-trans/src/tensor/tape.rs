//! Reverse-mode tape: op records plus the backward sweep.
//!
//! Every differentiable op is a method on [`Tape`]. An op is recorded only
//! when gradients are enabled and at least one input is tracked; outputs of
//! recorded ops are tracked in turn. Records hold cheap handles to their
//! input/output tensors (plus whatever per-op state backward needs), so the
//! tape is in topological order by construction and [`Tape::backward`]
//! visits each record exactly once in reverse.

use std::collections::HashMap;

use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

enum Op {
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { a: Tensor, c: f32 },
    AddRowVec { x: Tensor, bias: Tensor },
    Relu { x: Tensor },
    LeakyRelu { x: Tensor, slope: f32 },
    Gelu { x: Tensor },
    Tanh { x: Tensor },
    Sigmoid { x: Tensor },
    Log { x: Tensor },
    Sum { x: Tensor },
    Mean { x: Tensor },
    Reshape { x: Tensor },
    Permute { x: Tensor, axes: Vec<usize> },
    Concat { parts: Vec<Tensor>, axis: usize },
    StrideChannels { x: Tensor, offset: usize },
    InterleaveChannels { a: Tensor, b: Tensor },
    NearestUpsample2 { x: Tensor },
    Matmul { a: Tensor, b: Tensor },
    Conv2d { x: Tensor, w: Tensor, bias: Tensor, stride: usize, padding: usize },
    Softmax { x: Tensor, axis: usize },
    BnTrain { x: Tensor, gamma: Tensor, beta: Tensor, xhat: Vec<f32>, invstd: Vec<f32> },
    BnEval { x: Tensor, gamma: Tensor, beta: Tensor, mean: Vec<f32>, invstd: Vec<f32> },
    L1Loss { a: Tensor, b: Tensor },
    MseLoss { a: Tensor, b: Tensor },
    BceWithLogits { logits: Tensor, target: f32 },
    TvLoss { x: Tensor },
}

struct Record {
    out: Tensor,
    op: Op,
}

/// Reverse-mode computation record.
pub struct Tape {
    records: Vec<Record>,
    grad_enabled: bool,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn nchw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::dim(op, format!("expected 4-d NCHW input, got {:?}", t.shape()))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Tape {
        Tape { records: Vec::new(), grad_enabled: true, check_finite: false }
    }

    /// Tape that records nothing (inference / oracle forwards).
    pub fn no_grad() -> Tape {
        Tape { records: Vec::new(), grad_enabled: false, check_finite: false }
    }

    /// Opt-in NaN/Inf screening of every op output.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    /// Drops all records (start of a fresh step).
    pub fn clear(&mut self) {
        self.records.clear();
    }

    fn finish(
        &mut self,
        name: &'static str,
        op: Op,
        data: Vec<f32>,
        shape: Vec<usize>,
        tracked: bool,
    ) -> Result<Tensor> {
        if self.check_finite {
            if let Some((i, &v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite { op: name, index: i, value: v });
            }
        }
        let out = Tensor::derived(data, shape, tracked);
        if tracked {
            self.records.push(Record { out: out.clone(), op });
        }
        Ok(out)
    }

    fn finish_scalar(&mut self, name: &'static str, op: Op, value: f64, tracked: bool) -> Result<Tensor> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name, index: 0, value: value as f32 });
        }
        let out = Tensor::derived_scalar(value, tracked);
        if tracked {
            self.records.push(Record { out: out.clone(), op });
        }
        Ok(out)
    }

    fn track1(&self, a: &Tensor) -> bool {
        self.grad_enabled && a.is_tracked()
    }

    fn track2(&self, a: &Tensor, b: &Tensor) -> bool {
        self.grad_enabled && (a.is_tracked() || b.is_tracked())
    }

    // ── Elementwise arithmetic ─────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "add")?;
        let tracked = self.track2(a, b);
        if a.numel() == 1 {
            let op = Op::Add { a: a.clone(), b: b.clone() };
            return self.finish_scalar("add", op, a.item_f64() + b.item_f64(), tracked);
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.finish("add", Op::Add { a: a.clone(), b: b.clone() }, data, a.shape().to_vec(), tracked)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "sub")?;
        let tracked = self.track2(a, b);
        if a.numel() == 1 {
            let op = Op::Sub { a: a.clone(), b: b.clone() };
            return self.finish_scalar("sub", op, a.item_f64() - b.item_f64(), tracked);
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.finish("sub", Op::Sub { a: a.clone(), b: b.clone() }, data, a.shape().to_vec(), tracked)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "mul")?;
        let tracked = self.track2(a, b);
        if a.numel() == 1 {
            let op = Op::Mul { a: a.clone(), b: b.clone() };
            return self.finish_scalar("mul", op, a.item_f64() * b.item_f64(), tracked);
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.finish("mul", Op::Mul { a: a.clone(), b: b.clone() }, data, a.shape().to_vec(), tracked)
    }

    pub fn scale(&mut self, a: &Tensor, c: f32) -> Result<Tensor> {
        let tracked = self.track1(a);
        if a.numel() == 1 {
            let op = Op::Scale { a: a.clone(), c };
            return self.finish_scalar("scale", op, a.item_f64() * c as f64, tracked);
        }
        let data = a.data().iter().map(|x| x * c).collect();
        self.finish("scale", Op::Scale { a: a.clone(), c }, data, a.shape().to_vec(), tracked)
    }

    /// x (…×n) + bias (n), broadcast over leading dims.
    pub fn add_rowvec(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let n = *x.shape().last().ok_or_else(|| Error::dim("add_rowvec", "scalar input".to_string()))?;
        if bias.shape() != [n] {
            return Err(Error::dim(
                "add_rowvec",
                format!("bias shape {:?} does not match last dim {n}", bias.shape()),
            ));
        }
        let bd = bias.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % n])
            .collect();
        let tracked = self.track2(x, bias);
        self.finish(
            "add_rowvec",
            Op::AddRowVec { x: x.clone(), bias: bias.clone() },
            data,
            x.shape().to_vec(),
            tracked,
        )
    }

    // ── Activations ────────────────────────────────────────────────────

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let tracked = self.track1(x);
        self.finish("relu", Op::Relu { x: x.clone() }, data, x.shape().to_vec(), tracked)
    }

    pub fn leaky_relu(&mut self, x: &Tensor, slope: f32) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let tracked = self.track1(x);
        self.finish(
            "leaky_relu",
            Op::LeakyRelu { x: x.clone(), slope },
            data,
            x.shape().to_vec(),
            tracked,
        )
    }

    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| ops::gelu(v)).collect();
        let tracked = self.track1(x);
        self.finish("gelu", Op::Gelu { x: x.clone() }, data, x.shape().to_vec(), tracked)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| v.tanh()).collect();
        let tracked = self.track1(x);
        self.finish("tanh", Op::Tanh { x: x.clone() }, data, x.shape().to_vec(), tracked)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let tracked = self.track1(x);
        self.finish("sigmoid", Op::Sigmoid { x: x.clone() }, data, x.shape().to_vec(), tracked)
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        let data = x.data().iter().map(|&v| v.ln()).collect();
        let tracked = self.track1(x);
        self.finish("log", Op::Log { x: x.clone() }, data, x.shape().to_vec(), tracked)
    }

    // ── Reductions ─────────────────────────────────────────────────────

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().map(|&v| v as f64).sum();
        let tracked = self.track1(x);
        self.finish_scalar("sum", Op::Sum { x: x.clone() }, s, tracked)
    }

    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().map(|&v| v as f64).sum();
        let tracked = self.track1(x);
        self.finish_scalar("mean", Op::Mean { x: x.clone() }, s / x.numel() as f64, tracked)
    }

    // ── Shape ops ──────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != x.numel() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", x.shape(), shape),
            ));
        }
        let tracked = self.track1(x);
        // Row-major contiguous: reshape shares the buffer.
        let out = x.derived_view(shape.to_vec(), tracked);
        if tracked {
            self.records.push(Record { out: out.clone(), op: Op::Reshape { x: x.clone() } });
        }
        Ok(out)
    }

    pub fn permute(&mut self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let rank = x.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(
                "permute",
                format!("axes {:?} is not a permutation of 0..{rank}", axes),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let data = permute_data(x.data(), x.shape(), axes);
        let tracked = self.track1(x);
        self.finish(
            "permute",
            Op::Permute { x: x.clone(), axes: axes.to_vec() },
            data,
            out_shape,
            tracked,
        )
    }

    /// Swaps the last two axes (batched transpose).
    pub fn transpose_last2(&mut self, x: &Tensor) -> Result<Tensor> {
        let rank = x.shape().len();
        if rank < 2 {
            return Err(Error::dim("transpose", format!("rank-{rank} input")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs".to_string()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::dim("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.shape().len() != rank
                || p.shape()[..axis] != first.shape()[..axis]
                || p.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(Error::dim(
                    "concat",
                    format!("incompatible shapes {:?} vs {:?} on axis {axis}", first.shape(), p.shape()),
                ));
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut data = vec![0.0f32; outer * axis_total * inner];
        let row = axis_total * inner;
        let mut off = 0;
        for p in parts {
            let pa = p.shape()[axis];
            let pd = p.data();
            for o in 0..outer {
                let src = &pd[o * pa * inner..(o + 1) * pa * inner];
                let dst = &mut data[o * row + off..o * row + off + pa * inner];
                dst.copy_from_slice(src);
            }
            off += pa * inner;
        }
        let tracked = self.grad_enabled && parts.iter().any(|p| p.is_tracked());
        self.finish(
            "concat",
            Op::Concat { parts: parts.iter().map(|p| (*p).clone()).collect(), axis },
            data,
            out_shape,
            tracked,
        )
    }

    /// Gathers channels `offset, offset+2, offset+4, …` of an NCHW tensor.
    pub fn stride_channels(&mut self, x: &Tensor, offset: usize) -> Result<Tensor> {
        let (b, c, h, w) = nchw(x, "stride_channels")?;
        if c % 2 != 0 {
            return Err(Error::dim("stride_channels", format!("odd channel count {c}")));
        }
        if offset > 1 {
            return Err(Error::dim("stride_channels", format!("offset {offset} not in {{0,1}}")));
        }
        let half = c / 2;
        let hw = h * w;
        let mut data = vec![0.0f32; b * half * hw];
        let xd = x.data();
        for bi in 0..b {
            for j in 0..half {
                let src = &xd[(bi * c + 2 * j + offset) * hw..][..hw];
                data[(bi * half + j) * hw..][..hw].copy_from_slice(src);
            }
        }
        let tracked = self.track1(x);
        self.finish(
            "stride_channels",
            Op::StrideChannels { x: x.clone(), offset },
            data,
            vec![b, half, h, w],
            tracked,
        )
    }

    /// Inverse of two [`Tape::stride_channels`] gathers: out channel 2j is
    /// `a[j]`, channel 2j+1 is `b[j]`.
    pub fn interleave_channels(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "interleave_channels")?;
        let (bs, c, h, w) = nchw(a, "interleave_channels")?;
        let hw = h * w;
        let mut data = vec![0.0f32; 2 * a.numel()];
        let (ad, bd) = (a.data(), b.data());
        for bi in 0..bs {
            for j in 0..c {
                let dst0 = (bi * 2 * c + 2 * j) * hw;
                data[dst0..dst0 + hw].copy_from_slice(&ad[(bi * c + j) * hw..][..hw]);
                data[dst0 + hw..dst0 + 2 * hw].copy_from_slice(&bd[(bi * c + j) * hw..][..hw]);
            }
        }
        let tracked = self.track2(a, b);
        self.finish(
            "interleave_channels",
            Op::InterleaveChannels { a: a.clone(), b: b.clone() },
            data,
            vec![bs, 2 * c, h, w],
            tracked,
        )
    }

    /// Nearest-neighbor ×2 spatial upsampling of an NCHW tensor.
    pub fn nearest_upsample2(&mut self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = nchw(x, "nearest_upsample2")?;
        let xd = x.data();
        let mut data = vec![0.0f32; b * c * 4 * h * w];
        let (h2, w2) = (2 * h, 2 * w);
        for p in 0..b * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * h2 * w2..(p + 1) * h2 * w2];
            for i in 0..h {
                for j in 0..w {
                    let v = src[i * w + j];
                    let r0 = (2 * i) * w2 + 2 * j;
                    dst[r0] = v;
                    dst[r0 + 1] = v;
                    dst[r0 + w2] = v;
                    dst[r0 + w2 + 1] = v;
                }
            }
        }
        let tracked = self.track1(x);
        self.finish(
            "nearest_upsample2",
            Op::NearestUpsample2 { x: x.clone() },
            data,
            vec![b, c, h2, w2],
            tracked,
        )
    }

    // ── Linear algebra / NN ────────────────────────────────────────────

    /// Batched matrix product: (…, m, k) · (…, k, n) with equal leading dims.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ra, rb) = (a.shape().len(), b.shape().len());
        if ra < 2 || rb < 2 || ra != rb {
            return Err(Error::dim(
                "matmul",
                format!("ranks must match and be ≥ 2, got {:?} and {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, ka) = (a.shape()[ra - 2], a.shape()[ra - 1]);
        let (kb, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
        if ka != kb || a.shape()[..ra - 2] != b.shape()[..rb - 2] {
            return Err(Error::dim(
                "matmul",
                format!("incompatible shapes {:?} × {:?}", a.shape(), b.shape()),
            ));
        }
        let batch: usize = a.shape()[..ra - 2].iter().product();
        let mut data = vec![0.0f32; batch * m * n];
        for bi in 0..batch {
            ops::mm(
                &a.data()[bi * m * ka..(bi + 1) * m * ka],
                &b.data()[bi * ka * n..(bi + 1) * ka * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                ka,
                n,
            );
        }
        let mut out_shape = a.shape()[..ra - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let tracked = self.track2(a, b);
        self.finish("matmul", Op::Matmul { a: a.clone(), b: b.clone() }, data, out_shape, tracked)
    }

    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (b, c_in, h, wd) = nchw(x, "conv2d")?;
        let (c_out, wc_in, k, k2) = nchw(w, "conv2d")?;
        if k != k2 {
            return Err(Error::dim("conv2d", format!("non-square kernel {k}×{k2}")));
        }
        if wc_in != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("input has {c_in} channels but weight expects {wc_in}"),
            ));
        }
        if bias.shape() != [c_out] {
            return Err(Error::dim(
                "conv2d",
                format!("bias shape {:?}, expected [{c_out}]", bias.shape()),
            ));
        }
        if k < 1 || stride < 1 || h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::dim(
                "conv2d",
                format!("invalid geometry: input {h}×{wd}, kernel {k}, stride {stride}, padding {padding}"),
            ));
        }
        let data = ops::conv2d_forward(
            x.data(), w.data(), bias.data(), b, c_in, h, wd, c_out, k, stride, padding,
        );
        let ho = ops::conv_out_dim(h, k, stride, padding);
        let wo = ops::conv_out_dim(wd, k, stride, padding);
        let tracked = self.grad_enabled && (x.is_tracked() || w.is_tracked() || bias.is_tracked());
        self.finish(
            "conv2d",
            Op::Conv2d { x: x.clone(), w: w.clone(), bias: bias.clone(), stride, padding },
            data,
            vec![b, c_out, ho, wo],
            tracked,
        )
    }

    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        let rank = x.shape().len();
        if axis >= rank {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for rank {rank}")));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let len = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let data = ops::softmax_forward(x.data(), outer, len, inner);
        let tracked = self.track1(x);
        self.finish("softmax", Op::Softmax { x: x.clone(), axis }, data, x.shape().to_vec(), tracked)
    }

    /// Train-mode batch norm. Returns the output plus the biased batch
    /// moments so the caller can fold them into running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f32,
    ) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
        let (b, c, h, w) = nchw(x, "batch_norm")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim(
                "batch_norm",
                format!("gamma/beta shapes {:?}/{:?}, expected [{c}]", gamma.shape(), beta.shape()),
            ));
        }
        let out = ops::batchnorm_train_forward(x.data(), gamma.data(), beta.data(), b, c, h * w, eps);
        let tracked = self.grad_enabled && (x.is_tracked() || gamma.is_tracked() || beta.is_tracked());
        let y = self.finish(
            "batch_norm",
            Op::BnTrain {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat: out.xhat,
                invstd: out.invstd,
            },
            out.y,
            x.shape().to_vec(),
            tracked,
        )?;
        Ok((y, out.mean, out.var))
    }

    /// Eval-mode batch norm against fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Tensor> {
        let (b, c, h, w) = nchw(x, "batch_norm")?;
        if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm", format!("stat lengths do not match {c} channels")));
        }
        let invstd: Vec<f32> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let hw = h * w;
        let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
        let mut data = vec![0.0f32; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let (m, is, g, be) = (running_mean[ci], invstd[ci], gd[ci], bd[ci]);
                for j in 0..hw {
                    data[base + j] = (xd[base + j] - m) * is * g + be;
                }
            }
        }
        let tracked = self.grad_enabled && (x.is_tracked() || gamma.is_tracked() || beta.is_tracked());
        self.finish(
            "batch_norm",
            Op::BnEval {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: running_mean.to_vec(),
                invstd,
            },
            data,
            x.shape().to_vec(),
            tracked,
        )
    }

    // ── Losses ─────────────────────────────────────────────────────────

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "l1_loss")?;
        let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum();
        let tracked = self.track2(a, b);
        self.finish_scalar("l1_loss", Op::L1Loss { a: a.clone(), b: b.clone() }, s / a.numel() as f64, tracked)
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "mse_loss")?;
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        let tracked = self.track2(a, b);
        self.finish_scalar("mse_loss", Op::MseLoss { a: a.clone(), b: b.clone() }, s / a.numel() as f64, tracked)
    }

    /// Mean binary cross-entropy of sigmoid(logits) against a constant
    /// target, computed in log space with probabilities clamped at 1e-12.
    pub fn bce_with_logits(&mut self, logits: &Tensor, target: f32) -> Result<Tensor> {
        let mut s = 0.0f64;
        for &l in logits.data() {
            let p = stable_sigmoid(l);
            s += -(target as f64) * (p.max(1e-12) as f64).ln()
                - (1.0 - target as f64) * ((1.0 - p).max(1e-12) as f64).ln();
        }
        let tracked = self.track1(logits);
        self.finish_scalar(
            "bce_with_logits",
            Op::BceWithLogits { logits: logits.clone(), target },
            s / logits.numel() as f64,
            tracked,
        )
    }

    /// Total variation: mean |vertical diff| + mean |horizontal diff|.
    pub fn tv_loss(&mut self, img: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = nchw(img, "tv_loss")?;
        if h < 2 || w < 2 {
            return Err(Error::dim("tv_loss", format!("need H,W ≥ 2, got {h}×{w}")));
        }
        let d = img.data();
        let mut vert = 0.0f64;
        let mut horiz = 0.0f64;
        for p in 0..b * c {
            let plane = &d[p * h * w..(p + 1) * h * w];
            for i in 0..h - 1 {
                for j in 0..w {
                    vert += (plane[(i + 1) * w + j] - plane[i * w + j]).abs() as f64;
                }
            }
            for i in 0..h {
                for j in 0..w - 1 {
                    horiz += (plane[i * w + j + 1] - plane[i * w + j]).abs() as f64;
                }
            }
        }
        let nv = (b * c * (h - 1) * w) as f64;
        let nh = (b * c * h * (w - 1)) as f64;
        let tracked = self.track1(img);
        self.finish_scalar("tv_loss", Op::TvLoss { x: img.clone() }, vert / nv + horiz / nh, tracked)
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Leaf parameters reachable from the
    /// root receive `∂root/∂leaf` in their grad cells (accumulating on top
    /// of anything already there).
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        if root.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("root must be scalar, got shape {:?}", root.shape()),
            ));
        }
        if !root.is_tracked() || !self.records.iter().any(|r| r.out.id() == root.id()) {
            return Err(Error::contract("backward", "root was not produced on this tape".to_string()));
        }
        let mut ws: HashMap<u64, Vec<f32>> = HashMap::new();
        ws.insert(root.id(), vec![1.0]);
        for rec in self.records.iter().rev() {
            let Some(dout) = ws.remove(&rec.out.id()) else { continue };
            backward_op(&rec.op, &rec.out, &dout, &mut ws);
        }
        Ok(())
    }
}

/// Routes a gradient to its destination: grad cell for leaf parameters,
/// workspace for tracked intermediates.
fn sink(target: &Tensor, delta: Vec<f32>, ws: &mut HashMap<u64, Vec<f32>>) {
    if target.requires_grad() {
        target.accumulate_grad(&delta);
    } else if target.is_tracked() {
        match ws.entry(target.id()) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (g, d) in e.get_mut().iter_mut().zip(&delta) {
                    *g += d;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(delta);
            }
        }
    }
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_data(x: &[f32], shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let rank = shape.len();
    // Fast path: swap of the last two axes.
    if rank >= 2
        && axes[..rank - 2].iter().enumerate().all(|(i, &a)| a == i)
        && axes[rank - 2] == rank - 1
        && axes[rank - 1] == rank - 2
    {
        let (r, c) = (shape[rank - 2], shape[rank - 1]);
        let batch = x.len() / (r * c);
        let mut out = vec![0.0f32; x.len()];
        for bi in 0..batch {
            let src = &x[bi * r * c..(bi + 1) * r * c];
            let dst = &mut out[bi * r * c..(bi + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        return out;
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides_in: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0f32; x.len()];
    let mut coords = vec![0usize; rank];
    for (oi, slot) in out.iter_mut().enumerate() {
        let mut rem = oi;
        let mut src = 0;
        for d in 0..rank {
            let extent: usize = out_shape[d + 1..].iter().product();
            coords[d] = rem / extent.max(1);
            rem %= extent.max(1);
            src += coords[d] * out_strides_in[d];
        }
        *slot = x[src];
    }
    out
}

fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn backward_op(op: &Op, out: &Tensor, dout: &[f32], ws: &mut HashMap<u64, Vec<f32>>) {
    match op {
        Op::Add { a, b } => {
            if a.is_tracked() {
                sink(a, dout.to_vec(), ws);
            }
            if b.is_tracked() {
                sink(b, dout.to_vec(), ws);
            }
        }
        Op::Sub { a, b } => {
            if a.is_tracked() {
                sink(a, dout.to_vec(), ws);
            }
            if b.is_tracked() {
                sink(b, dout.iter().map(|v| -v).collect(), ws);
            }
        }
        Op::Mul { a, b } => {
            if a.is_tracked() {
                sink(a, dout.iter().zip(b.data()).map(|(d, y)| d * y).collect(), ws);
            }
            if b.is_tracked() {
                sink(b, dout.iter().zip(a.data()).map(|(d, x)| d * x).collect(), ws);
            }
        }
        Op::Scale { a, c } => {
            if a.is_tracked() {
                sink(a, dout.iter().map(|d| d * c).collect(), ws);
            }
        }
        Op::AddRowVec { x, bias } => {
            if x.is_tracked() {
                sink(x, dout.to_vec(), ws);
            }
            if bias.is_tracked() {
                let n = bias.numel();
                let mut db = vec![0.0f32; n];
                for (i, d) in dout.iter().enumerate() {
                    db[i % n] += d;
                }
                sink(bias, db, ws);
            }
        }
        Op::Relu { x } => {
            if x.is_tracked() {
                let dx = x
                    .data()
                    .iter()
                    .zip(dout)
                    .map(|(&v, d)| if v > 0.0 { *d } else { 0.0 })
                    .collect();
                sink(x, dx, ws);
            }
        }
        Op::LeakyRelu { x, slope } => {
            if x.is_tracked() {
                let dx = x
                    .data()
                    .iter()
                    .zip(dout)
                    .map(|(&v, d)| if v > 0.0 { *d } else { slope * d })
                    .collect();
                sink(x, dx, ws);
            }
        }
        Op::Gelu { x } => {
            if x.is_tracked() {
                let dx = x.data().iter().zip(dout).map(|(&v, d)| d * ops::gelu_grad(v)).collect();
                sink(x, dx, ws);
            }
        }
        Op::Tanh { x } => {
            if x.is_tracked() {
                let dx = out.data().iter().zip(dout).map(|(&y, d)| d * (1.0 - y * y)).collect();
                sink(x, dx, ws);
            }
        }
        Op::Sigmoid { x } => {
            if x.is_tracked() {
                let dx = out.data().iter().zip(dout).map(|(&y, d)| d * y * (1.0 - y)).collect();
                sink(x, dx, ws);
            }
        }
        Op::Log { x } => {
            if x.is_tracked() {
                let dx = x.data().iter().zip(dout).map(|(&v, d)| d / v).collect();
                sink(x, dx, ws);
            }
        }
        Op::Sum { x } => {
            if x.is_tracked() {
                sink(x, vec![dout[0]; x.numel()], ws);
            }
        }
        Op::Mean { x } => {
            if x.is_tracked() {
                sink(x, vec![dout[0] / x.numel() as f32; x.numel()], ws);
            }
        }
        Op::Reshape { x } => {
            if x.is_tracked() {
                sink(x, dout.to_vec(), ws);
            }
        }
        Op::Permute { x, axes } => {
            if x.is_tracked() {
                let dx = permute_data(dout, out.shape(), &invert_axes(axes));
                sink(x, dx, ws);
            }
        }
        Op::Concat { parts, axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[*axis + 1..].iter().product();
            let row = out.shape()[*axis] * inner;
            let mut off = 0;
            for p in parts {
                let pa = p.shape()[*axis];
                if p.is_tracked() {
                    let mut dp = vec![0.0f32; p.numel()];
                    for o in 0..outer {
                        dp[o * pa * inner..(o + 1) * pa * inner]
                            .copy_from_slice(&dout[o * row + off..o * row + off + pa * inner]);
                    }
                    sink(p, dp, ws);
                }
                off += pa * inner;
            }
        }
        Op::StrideChannels { x, offset } => {
            if x.is_tracked() {
                let [b, c, h, w] = *x.shape() else { unreachable!() };
                let hw = h * w;
                let half = c / 2;
                let mut dx = vec![0.0f32; x.numel()];
                for bi in 0..b {
                    for j in 0..half {
                        let dst = &mut dx[(bi * c + 2 * j + offset) * hw..][..hw];
                        dst.copy_from_slice(&dout[(bi * half + j) * hw..][..hw]);
                    }
                }
                sink(x, dx, ws);
            }
        }
        Op::InterleaveChannels { a, b } => {
            let [bs, c2, h, w] = *out.shape() else { unreachable!() };
            let c = c2 / 2;
            let hw = h * w;
            for (t, off) in [(a, 0usize), (b, 1usize)] {
                if t.is_tracked() {
                    let mut dt = vec![0.0f32; t.numel()];
                    for bi in 0..bs {
                        for j in 0..c {
                            let src = &dout[(bi * c2 + 2 * j + off) * hw..][..hw];
                            dt[(bi * c + j) * hw..][..hw].copy_from_slice(src);
                        }
                    }
                    sink(t, dt, ws);
                }
            }
        }
        Op::NearestUpsample2 { x } => {
            if x.is_tracked() {
                let [b, c, h, w] = *x.shape() else { unreachable!() };
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![0.0f32; x.numel()];
                for p in 0..b * c {
                    let src = &dout[p * h2 * w2..(p + 1) * h2 * w2];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            let r0 = (2 * i) * w2 + 2 * j;
                            dst[i * w + j] = src[r0] + src[r0 + 1] + src[r0 + w2] + src[r0 + w2 + 1];
                        }
                    }
                }
                sink(x, dx, ws);
            }
        }
        Op::Matmul { a, b } => {
            let ra = a.shape().len();
            let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
            let n = b.shape()[ra - 1];
            let batch: usize = a.shape()[..ra - 2].iter().product();
            if a.is_tracked() {
                let mut da = vec![0.0f32; a.numel()];
                for bi in 0..batch {
                    ops::mm_abt(
                        &dout[bi * m * n..(bi + 1) * m * n],
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                sink(a, da, ws);
            }
            if b.is_tracked() {
                let mut db = vec![0.0f32; b.numel()];
                for bi in 0..batch {
                    ops::mm_atb(
                        &a.data()[bi * m * k..(bi + 1) * m * k],
                        &dout[bi * m * n..(bi + 1) * m * n],
                        &mut db[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                sink(b, db, ws);
            }
        }
        Op::Conv2d { x, w, bias, stride, padding } => {
            let [b, c_in, h, wd] = *x.shape() else { unreachable!() };
            let [c_out, _, k, _] = *w.shape() else { unreachable!() };
            let (dx, dw, db) = ops::conv2d_backward(
                x.data(),
                w.data(),
                dout,
                b,
                c_in,
                h,
                wd,
                c_out,
                k,
                *stride,
                *padding,
                x.is_tracked(),
                w.is_tracked(),
                bias.is_tracked(),
            );
            if let Some(dx) = dx {
                sink(x, dx, ws);
            }
            if let Some(dw) = dw {
                sink(w, dw, ws);
            }
            if let Some(db) = db {
                sink(bias, db, ws);
            }
        }
        Op::Softmax { x, axis } => {
            if x.is_tracked() {
                let outer: usize = x.shape()[..*axis].iter().product();
                let len = x.shape()[*axis];
                let inner: usize = x.shape()[*axis + 1..].iter().product();
                let dx = ops::softmax_backward(out.data(), dout, outer, len, inner);
                sink(x, dx, ws);
            }
        }
        Op::BnTrain { x, gamma, beta, xhat, invstd } => {
            let [b, c, h, w] = *x.shape() else { unreachable!() };
            let (dx, dgamma, dbeta) =
                ops::batchnorm_train_backward(xhat, invstd, gamma.data(), dout, b, c, h * w);
            if x.is_tracked() {
                sink(x, dx, ws);
            }
            if gamma.is_tracked() {
                sink(gamma, dgamma, ws);
            }
            if beta.is_tracked() {
                sink(beta, dbeta, ws);
            }
        }
        Op::BnEval { x, gamma, beta, mean, invstd } => {
            let [b, c, h, w] = *x.shape() else { unreachable!() };
            let hw = h * w;
            let xd = x.data();
            let gd = gamma.data();
            if x.is_tracked() {
                let mut dx = vec![0.0f32; x.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let f = gd[ci] * invstd[ci];
                        for j in 0..hw {
                            dx[base + j] = dout[base + j] * f;
                        }
                    }
                }
                sink(x, dx, ws);
            }
            if gamma.is_tracked() || beta.is_tracked() {
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let (m, is) = (mean[ci], invstd[ci]);
                        let mut dg = 0.0f64;
                        let mut db = 0.0f64;
                        for j in 0..hw {
                            dg += (dout[base + j] * (xd[base + j] - m) * is) as f64;
                            db += dout[base + j] as f64;
                        }
                        dgamma[ci] += dg as f32;
                        dbeta[ci] += db as f32;
                    }
                }
                if gamma.is_tracked() {
                    sink(gamma, dgamma, ws);
                }
                if beta.is_tracked() {
                    sink(beta, dbeta, ws);
                }
            }
        }
        Op::L1Loss { a, b } => {
            let g = dout[0] / a.numel() as f32;
            if a.is_tracked() || b.is_tracked() {
                let da: Vec<f32> = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            g
                        } else if d < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if b.is_tracked() {
                    sink(b, da.iter().map(|v| -v).collect(), ws);
                }
                if a.is_tracked() {
                    sink(a, da, ws);
                }
            }
        }
        Op::MseLoss { a, b } => {
            let g = 2.0 * dout[0] / a.numel() as f32;
            if a.is_tracked() || b.is_tracked() {
                let da: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| g * (x - y)).collect();
                if b.is_tracked() {
                    sink(b, da.iter().map(|v| -v).collect(), ws);
                }
                if a.is_tracked() {
                    sink(a, da, ws);
                }
            }
        }
        Op::BceWithLogits { logits, target } => {
            if logits.is_tracked() {
                let g = dout[0] / logits.numel() as f32;
                let dl = logits.data().iter().map(|&l| (stable_sigmoid(l) - target) * g).collect();
                sink(logits, dl, ws);
            }
        }
        Op::TvLoss { x } => {
            if x.is_tracked() {
                let [b, c, h, w] = *x.shape() else { unreachable!() };
                let gv = dout[0] / (b * c * (h - 1) * w) as f32;
                let gh = dout[0] / (b * c * h * (w - 1)) as f32;
                let xd = x.data();
                let mut dx = vec![0.0f32; x.numel()];
                for p in 0..b * c {
                    let plane = &xd[p * h * w..(p + 1) * h * w];
                    let dplane = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..h - 1 {
                        for j in 0..w {
                            let d = plane[(i + 1) * w + j] - plane[i * w + j];
                            let s = if d > 0.0 { gv } else if d < 0.0 { -gv } else { 0.0 };
                            dplane[(i + 1) * w + j] += s;
                            dplane[i * w + j] -= s;
                        }
                    }
                    for i in 0..h {
                        for j in 0..w - 1 {
                            let d = plane[i * w + j + 1] - plane[i * w + j];
                            let s = if d > 0.0 { gh } else if d < 0.0 { -gh } else { 0.0 };
                            dplane[i * w + j + 1] += s;
                            dplane[i * w + j] -= s;
                        }
                    }
                }
                sink(x, dx, ws);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(data: Vec<f32>, shape: &[usize]) -> Tensor {
        Tensor::param(data, shape).unwrap()
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape = Tape::no_grad();
        let eye = Tensor::from_vec(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]).unwrap();
        let m = Tensor::from_vec((1..=9).map(|v| v as f32).collect(), &[3, 3]).unwrap();
        let out = tape.matmul(&eye, &m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::no_grad();
        let a = Tensor::from_vec(vec![1., 2., 3., 4.], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![5., 6.], &[2, 1]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
        assert_eq!(c.shape(), &[2, 1]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::no_grad();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(tape.matmul(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_uniform_and_reference_values() {
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec(vec![0.0, 0.0, 0.0], &[3]).unwrap();
        let y = tape.softmax(&x, 0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let x = Tensor::from_vec(vec![1000.0, 0.0], &[2]).unwrap();
        let y = tape.softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!(y.data()[1] < 1e-6);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let y = tape.softmax(&x, 0).unwrap();
        let expect = [0.09003057, 0.24472847, 0.66524096];
        for (v, e) in y.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_on_a_strided_axis_normalizes_lanes() {
        // Axis 0 of a 3×4 tensor: inner stride 4.
        let mut tape = Tape::new();
        let x = param(vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5, -1.0, 2.0, 2.5, 0.3, 0.7, -0.2], &[3, 4]);
        let y = tape.softmax(&x, 0).unwrap();
        for col in 0..4 {
            let s: f32 = (0..3).map(|row| y.data()[row * 4 + col]).sum();
            assert!((s - 1.0).abs() < 1e-5, "column {col} sums to {s}");
        }
        let err = crate::tensor::gradcheck(
            |t, x| {
                let s = t.softmax(x, 0)?;
                let w = Tensor::from_vec((0..12).map(|v| v as f32 * 0.3).collect(), &[3, 4]).unwrap();
                let m = t.mul(&s, &w)?;
                t.mean(&m)
            },
            &x.detach(),
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-2, "strided softmax gradcheck {err}");
    }

    #[test]
    fn concat_works_on_outer_and_inner_axes() {
        let mut tape = Tape::no_grad();
        let a = Tensor::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0], &[1, 2]).unwrap();
        let rows = tape.concat(&[&a, &b], 0).unwrap();
        assert_eq!(rows.shape(), &[2, 2]);
        assert_eq!(rows.data(), &[1.0, 2.0, 3.0, 4.0]);

        let c = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let d = Tensor::from_vec(vec![5.0, 6.0], &[2, 1]).unwrap();
        let cols = tape.concat(&[&c, &d], 1).unwrap();
        assert_eq!(cols.shape(), &[2, 3]);
        assert_eq!(cols.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = param(vec![3.0, -1.0, 2.0, 0.5], &[2, 2]);
        let s = tape.sum(&x).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = param(vec![1.0, 2.0, 3.0], &[3]);
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum(&sq).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn fanout_grads_add_across_paths() {
        // z = sum(x) + sum(x ⊙ x): dz/dx = 1 + 2x.
        let mut tape = Tape::new();
        let x = param(vec![1.0, -2.0, 0.5], &[3]);
        let s1 = tape.sum(&x).unwrap();
        let sq = tape.mul(&x, &x).unwrap();
        let s2 = tape.sum(&sq).unwrap();
        let z = tape.add(&s1, &s2).unwrap();
        tape.backward(&z).unwrap();
        let g = x.grad().unwrap();
        for (gi, xi) in g.iter().zip(x.data()) {
            assert!((gi - (1.0 + 2.0 * xi)).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_roots() {
        let mut tape = Tape::new();
        let x = param(vec![1.0, 2.0], &[2]);
        let y = tape.add(&x, &x).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Contract { .. })));
        let stray = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&stray), Err(Error::Contract { .. })));
    }

    #[test]
    fn reshape_and_permute_round_trip_bit_exact() {
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec((0..24).map(|v| v as f32 * 0.37).collect(), &[2, 3, 4]).unwrap();
        let r = tape.reshape(&x, &[4, 6]).unwrap();
        let back = tape.reshape(&r, &[2, 3, 4]).unwrap();
        assert_eq!(back.data(), x.data());

        let p = tape.permute(&x, &[2, 0, 1]).unwrap();
        let back = tape.permute(&p, &[1, 2, 0]).unwrap();
        assert_eq!(back.shape(), x.shape());
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn transpose_last2_matches_manual() {
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec(vec![1., 2., 3., 4., 5., 6.], &[1, 2, 3]).unwrap();
        let t = tape.transpose_last2(&x).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2]);
        assert_eq!(t.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn concat_then_backward_splits_gradient() {
        let mut tape = Tape::new();
        let a = param(vec![1.0, 2.0], &[1, 2]);
        let b = param(vec![3.0], &[1, 1]);
        let out = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
        let weighted = tape.mul(
            &out,
            &Tensor::from_vec(vec![10.0, 20.0, 30.0], &[1, 3]).unwrap(),
        ).unwrap();
        let s = tape.sum(&weighted).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(a.grad().unwrap(), vec![10.0, 20.0]);
        assert_eq!(b.grad().unwrap(), vec![30.0]);
    }

    #[test]
    fn parity_gather_and_interleave_invert() {
        let mut tape = Tape::no_grad();
        // 4 channels with constant values 10/20/30/40.
        let mut data = Vec::new();
        for v in [10.0f32, 20.0, 30.0, 40.0] {
            data.extend(std::iter::repeat_n(v, 4));
        }
        let x = Tensor::from_vec(data, &[1, 4, 2, 2]).unwrap();
        let odd = tape.stride_channels(&x, 0).unwrap();
        let even = tape.stride_channels(&x, 1).unwrap();
        assert_eq!(&odd.data()[..8], &[10.0; 4].iter().chain(&[30.0; 4]).copied().collect::<Vec<_>>()[..]);
        assert_eq!(&even.data()[..8], &[20.0; 4].iter().chain(&[40.0; 4]).copied().collect::<Vec<_>>()[..]);
        let back = tape.interleave_channels(&odd, &even).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn nearest_upsample_duplicates_pixels() {
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = tape.nearest_upsample2(&x).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::no_grad();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(tape.conv2d(&x, &w, &b, 1, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn finite_check_reports_index() {
        let mut tape = Tape::new();
        tape.set_check_finite(true);
        let x = param(vec![1.0, -1.0], &[2]);
        let y = tape.log(&x); // ln(-1) = NaN at index 1
        match y {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn loss_reference_values() {
        let mut tape = Tape::no_grad();
        // Zero logits: BCE to 1 and to 0 are both ln 2.
        let z = Tensor::zeros(&[2, 2]);
        let b1 = tape.bce_with_logits(&z, 1.0).unwrap().item();
        let b0 = tape.bce_with_logits(&z, 0.0).unwrap().item();
        assert!((b1 - std::f32::consts::LN_2).abs() < 1e-6);
        assert!((b0 - std::f32::consts::LN_2).abs() < 1e-6);

        // Constant image has zero TV.
        let c = Tensor::full(&[1, 3, 4, 4], 0.7);
        assert_eq!(tape.tv_loss(&c).unwrap().item(), 0.0);

        // [[0,1],[0,1]]: vertical 0, horizontal 1.
        let img = Tensor::from_vec(vec![0.0, 1.0, 0.0, 1.0], &[1, 1, 2, 2]).unwrap();
        assert!((tape.tv_loss(&img).unwrap().item() - 1.0).abs() < 1e-6);
    }
}
