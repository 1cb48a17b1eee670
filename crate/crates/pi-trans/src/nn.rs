//! Learnable layers and the fixed sub-networks of the generator: encoder
//! stem, up-sampling block, decoder head.
//!
//! Initialization follows the conditional-GAN convention: conv and dense
//! weights ~ Normal(0, 0.02), biases zero, batch-norm gamma 1 / beta 0.
//! Every composite exposes its parameter tree through `visit_params` in a
//! stable documented order (field order, depth first); checkpoints, Adam
//! and the profiler all rely on that order.

use std::sync::Mutex;

use crate::error::Result;
use crate::tensor::{Rng, Tape, Tensor};

pub const INIT_STD: f32 = 0.02;

/// Forward mode: train updates batch-norm running stats, eval reads them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Visitor over named parameters (stable order).
pub type ParamVisitor<'a> = dyn FnMut(&str, &Tensor) + 'a;
/// Mutable visitor, used by the optimizer to swap updated parameters in.
pub type ParamVisitorMut<'a> = dyn FnMut(&str, &mut Tensor) + 'a;
/// Visitor over named non-learnable state (batch-norm running stats).
pub type BufferVisitor<'a> = dyn FnMut(&str, &Mutex<Vec<f32>>) + 'a;

pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Clone for Conv2dLayer {
    fn clone(&self) -> Self {
        Conv2dLayer {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

impl Conv2dLayer {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, rng: &mut Rng) -> Conv2dLayer {
        Conv2dLayer {
            weight: Tensor::randn_param(&[c_out, c_in, k, k], 0.0, INIT_STD, rng),
            bias: Tensor::zeros_param(&[c_out]),
            stride,
            padding,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        tape.conv2d(x, &self.weight, &self.bias, self.stride, self.padding)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Mutex<Vec<f32>>,
    pub running_var: Mutex<Vec<f32>>,
    pub momentum: f32,
    pub eps: f32,
}

impl Clone for BatchNormLayer {
    fn clone(&self) -> Self {
        BatchNormLayer {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: Mutex::new(self.running_mean.lock().unwrap().clone()),
            running_var: Mutex::new(self.running_var.lock().unwrap().clone()),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

impl BatchNormLayer {
    pub fn new(c: usize) -> BatchNormLayer {
        BatchNormLayer {
            gamma: Tensor::ones_param(&[c]),
            beta: Tensor::zeros_param(&[c]),
            running_mean: Mutex::new(vec![0.0; c]),
            running_var: Mutex::new(vec![1.0; c]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, &self.gamma, &self.beta, self.eps)?;
                let n = (x.numel() / self.gamma.numel()) as f32;
                // Unbiased variance feeds the running estimate.
                let bessel = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let mut rm = self.running_mean.lock().unwrap();
                let mut rv = self.running_var.lock().unwrap();
                for c in 0..mean.len() {
                    rm[c] = (1.0 - self.momentum) * rm[c] + self.momentum * mean[c];
                    rv[c] = (1.0 - self.momentum) * rv[c] + self.momentum * var[c] * bessel;
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.running_mean.lock().unwrap().clone();
                let rv = self.running_var.lock().unwrap().clone();
                tape.batch_norm_eval(x, &self.gamma, &self.beta, &rm, &rv, self.eps)
            }
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut BufferVisitor) {
        f(&format!("{prefix}.running_mean"), &self.running_mean);
        f(&format!("{prefix}.running_var"), &self.running_var);
    }
}

/// Nearest ×2 upsampling followed by two conv+BN+ReLU stages
/// (c_in → c_out on the first conv, c_out → c_out on the second).
#[derive(Clone)]
pub struct UpsampleBlock {
    pub conv1: Conv2dLayer,
    pub bn1: BatchNormLayer,
    pub conv2: Conv2dLayer,
    pub bn2: BatchNormLayer,
}

impl UpsampleBlock {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Rng) -> UpsampleBlock {
        UpsampleBlock {
            conv1: Conv2dLayer::new(c_in, c_out, 3, 1, 1, rng),
            bn1: BatchNormLayer::new(c_out),
            conv2: Conv2dLayer::new(c_out, c_out, 3, 1, 1, rng),
            bn2: BatchNormLayer::new(c_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let up = tape.nearest_upsample2(x)?;
        let y = self.conv1.forward(tape, &up)?;
        let y = self.bn1.forward(tape, &y, mode)?;
        let y = tape.relu(&y)?;
        let y = self.conv2.forward(tape, &y)?;
        let y = self.bn2.forward(tape, &y, mode)?;
        tape.relu(&y)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params(&format!("{prefix}.bn2"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.conv1.visit_params_mut(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params_mut(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params_mut(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params_mut(&format!("{prefix}.bn2"), f);
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut BufferVisitor) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f);
    }
}

/// Image → L1 features: one two-strided conv then two one-strided convs
/// (filters c/2, c, c — i.e. 16/32/32 at the full-scale c = 32), each with
/// BN + ReLU. Output is (b, c, H/2, W/2).
#[derive(Clone)]
pub struct EncoderStem {
    pub conv1: Conv2dLayer,
    pub bn1: BatchNormLayer,
    pub conv2: Conv2dLayer,
    pub bn2: BatchNormLayer,
    pub conv3: Conv2dLayer,
    pub bn3: BatchNormLayer,
}

impl EncoderStem {
    pub fn new(c_l1: usize, rng: &mut Rng) -> EncoderStem {
        let mid = c_l1 / 2;
        EncoderStem {
            conv1: Conv2dLayer::new(3, mid, 3, 2, 1, rng),
            bn1: BatchNormLayer::new(mid),
            conv2: Conv2dLayer::new(mid, c_l1, 3, 1, 1, rng),
            bn2: BatchNormLayer::new(c_l1),
            conv3: Conv2dLayer::new(c_l1, c_l1, 3, 1, 1, rng),
            bn3: BatchNormLayer::new(c_l1),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let [_, _, h, w] = *x.shape() else {
            return Err(crate::error::Error::dim(
                "encoder_stem",
                format!("expected NCHW input, got {:?}", x.shape()),
            ));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(crate::error::Error::dim(
                "encoder_stem",
                format!("spatial dims must be even, got {h}×{w}"),
            ));
        }
        let y = self.conv1.forward(tape, x)?;
        let y = self.bn1.forward(tape, &y, mode)?;
        let y = tape.relu(&y)?;
        let y = self.conv2.forward(tape, &y)?;
        let y = self.bn2.forward(tape, &y, mode)?;
        let y = tape.relu(&y)?;
        let y = self.conv3.forward(tape, &y)?;
        let y = self.bn3.forward(tape, &y, mode)?;
        tape.relu(&y)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params(&format!("{prefix}.bn2"), f);
        self.conv3.visit_params(&format!("{prefix}.conv3"), f);
        self.bn3.visit_params(&format!("{prefix}.bn3"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.conv1.visit_params_mut(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params_mut(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params_mut(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params_mut(&format!("{prefix}.bn2"), f);
        self.conv3.visit_params_mut(&format!("{prefix}.conv3"), f);
        self.bn3.visit_params_mut(&format!("{prefix}.bn3"), f);
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut BufferVisitor) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f);
        self.bn3.visit_buffers(&format!("{prefix}.bn3"), f);
    }
}

/// Features → RGB: three one-strided convs (c → c → c → 3); BN + ReLU after
/// the first two, Tanh after the last (no normalization on the final layer).
#[derive(Clone)]
pub struct DecoderHead {
    pub conv1: Conv2dLayer,
    pub bn1: BatchNormLayer,
    pub conv2: Conv2dLayer,
    pub bn2: BatchNormLayer,
    pub conv3: Conv2dLayer,
}

impl DecoderHead {
    pub fn new(c_in: usize, rng: &mut Rng) -> DecoderHead {
        DecoderHead {
            conv1: Conv2dLayer::new(c_in, c_in, 3, 1, 1, rng),
            bn1: BatchNormLayer::new(c_in),
            conv2: Conv2dLayer::new(c_in, c_in, 3, 1, 1, rng),
            bn2: BatchNormLayer::new(c_in),
            conv3: Conv2dLayer::new(c_in, 3, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv1.forward(tape, x)?;
        let y = self.bn1.forward(tape, &y, mode)?;
        let y = tape.relu(&y)?;
        let y = self.conv2.forward(tape, &y)?;
        let y = self.bn2.forward(tape, &y, mode)?;
        let y = tape.relu(&y)?;
        let y = self.conv3.forward(tape, &y)?;
        tape.tanh(&y)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params(&format!("{prefix}.bn2"), f);
        self.conv3.visit_params(&format!("{prefix}.conv3"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.conv1.visit_params_mut(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params_mut(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params_mut(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params_mut(&format!("{prefix}.bn2"), f);
        self.conv3.visit_params_mut(&format!("{prefix}.conv3"), f);
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut BufferVisitor) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f);
    }
}
