//! Implicit transformation: residual spatial attention where semantic-map
//! features (queries) select from direct-translation features (keys) to
//! re-weight a value feature.
//!
//! Queries and keys are reduced c → c/4 by learnable 1×1 convolutions, then
//! flattened to (b, c/4, n) with n = h·w. Scores S = QᵀK are row-softmaxed
//! into A (output position i attends over all source positions j) and the
//! output is V + V·Aᵀ — linear in V, with a plain residual and no score
//! scaling by default.

use crate::error::{Error, Result};
use crate::nn::{BufferVisitor, Conv2dLayer, Mode, ParamVisitor, ParamVisitorMut, UpsampleBlock};
use crate::tensor::{Rng, Tape, Tensor};

pub struct ImplicitTransformModule {
    pub q_proj: Conv2dLayer,
    pub k_proj: Conv2dLayer,
    channels: usize,
    scale_scores: bool,
}

impl Clone for ImplicitTransformModule {
    fn clone(&self) -> Self {
        ImplicitTransformModule {
            q_proj: self.q_proj.clone(),
            k_proj: self.k_proj.clone(),
            channels: self.channels,
            scale_scores: self.scale_scores,
        }
    }
}

impl ImplicitTransformModule {
    pub fn new(channels: usize, scale_scores: bool, rng: &mut Rng) -> Result<ImplicitTransformModule> {
        if !channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "implicit transform needs channels divisible by 4, got {channels}"
            )));
        }
        Ok(ImplicitTransformModule {
            q_proj: Conv2dLayer::new(channels, channels / 4, 1, 1, 0, rng),
            k_proj: Conv2dLayer::new(channels, channels / 4, 1, 1, 0, rng),
            channels,
            scale_scores,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check_inputs(&self, fq: &Tensor, fk: &Tensor, fv: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let [b, c, h, w] = *fq.shape() else {
            return Err(Error::dim("itm", format!("expected NCHW inputs, got {:?}", fq.shape())));
        };
        if fk.shape() != fq.shape() || fv.shape() != fq.shape() {
            return Err(Error::dim(
                "itm",
                format!(
                    "inputs must share one shape: Q {:?}, K {:?}, V {:?}",
                    fq.shape(),
                    fk.shape(),
                    fv.shape()
                ),
            ));
        }
        if c != self.channels {
            return Err(Error::dim(
                "itm",
                format!("inputs have {c} channels, module built for {}", self.channels),
            ));
        }
        Ok((b, c, h, w))
    }

    /// The n×n attention map A (rows sum to 1).
    pub fn attention(&self, tape: &mut Tape, fq: &Tensor, fk: &Tensor) -> Result<Tensor> {
        let [b, _, h, w] = *fq.shape() else {
            return Err(Error::dim("itm", format!("expected NCHW inputs, got {:?}", fq.shape())));
        };
        let n = h * w;
        let c4 = self.channels / 4;
        let q = self.q_proj.forward(tape, fq)?;
        let q = tape.reshape(&q, &[b, c4, n])?;
        let k = self.k_proj.forward(tape, fk)?;
        let k = tape.reshape(&k, &[b, c4, n])?;
        let qt = tape.transpose_last2(&q)?;
        let mut scores = tape.matmul(&qt, &k)?;
        if self.scale_scores {
            scores = tape.scale(&scores, 1.0 / (c4 as f32).sqrt())?;
        }
        tape.softmax(&scores, 2)
    }

    /// V + V·Aᵀ, reshaped back to (b, c, h, w).
    pub fn forward(&self, tape: &mut Tape, fq: &Tensor, fk: &Tensor, fv: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = self.check_inputs(fq, fk, fv)?;
        let n = h * w;
        let attn = self.attention(tape, fq, fk)?;
        let v = tape.reshape(fv, &[b, c, n])?;
        let at = tape.transpose_last2(&attn)?;
        let va = tape.matmul(&v, &at)?;
        let out = tape.add(&v, &va)?;
        tape.reshape(&out, &[b, c, h, w])
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor) {
        self.q_proj.visit_params(&format!("{prefix}.q_proj"), f);
        self.k_proj.visit_params(&format!("{prefix}.k_proj"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.q_proj.visit_params_mut(&format!("{prefix}.q_proj"), f);
        self.k_proj.visit_params_mut(&format!("{prefix}.k_proj"), f);
    }

    pub fn visit_buffers(&self, _prefix: &str, _f: &mut BufferVisitor) {}
}

/// The three-level fusion chain of the decoder: V at L4 is F_Q + F_K, each
/// module's output is upsampled into the next level's V, and the L2 output
/// is returned. With `modules` absent (ablated variants) every attention
/// step degenerates to the identity on V.
#[allow(clippy::too_many_arguments)]
pub fn level_chain_forward(
    tape: &mut Tape,
    fq: [&Tensor; 3],
    fk: [&Tensor; 3],
    modules: Option<[&ImplicitTransformModule; 3]>,
    up43: &UpsampleBlock,
    up32: &UpsampleBlock,
    mode: Mode,
) -> Result<Tensor> {
    for (level, (q, k)) in ["L4", "L3", "L2"].iter().zip(fq.iter().zip(fk.iter())) {
        if q.shape() != k.shape() {
            return Err(Error::dim(
                "level_chain",
                format!("{level}: F_Q {:?} vs F_K {:?}", q.shape(), k.shape()),
            ));
        }
    }
    // L3/L2 must sit at 2×/4× the L4 resolution with half/quarter channels.
    for (i, level) in ["L3", "L2"].iter().enumerate() {
        let [b4, c4, h4, w4] = *fq[0].shape() else {
            return Err(Error::dim("level_chain", format!("L4 not NCHW: {:?}", fq[0].shape())));
        };
        let f = 1 << (i + 1);
        let expect = [b4, c4 / f, h4 * f, w4 * f];
        if fq[i + 1].shape() != expect {
            return Err(Error::dim(
                "level_chain",
                format!("{level}: expected {:?}, got {:?}", expect, fq[i + 1].shape()),
            ));
        }
    }

    let fv4 = tape.add(fq[0], fk[0])?;
    let f4 = match modules {
        Some(m) => m[0].forward(tape, fq[0], fk[0], &fv4)?,
        None => fv4,
    };
    let fv3 = up43.forward(tape, &f4, mode)?;
    let f3 = match modules {
        Some(m) => m[1].forward(tape, fq[1], fk[1], &fv3)?,
        None => fv3,
    };
    let fv2 = up32.forward(tape, &f3, mode)?;
    match modules {
        Some(m) => m[2].forward(tape, fq[2], fk[2], &fv2),
        None => Ok(fv2),
    }
}
