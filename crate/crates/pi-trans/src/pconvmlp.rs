//! Parallel Conv-MLP encoder block.
//!
//! A block halves the spatial dims and doubles the channels: a strided conv
//! then a plain conv (each BN + ReLU) produce X′; X′ is parity-split along
//! channels into a channel-MLP branch (odd channels, 0-based 0,2,4,…) and a
//! spatial-MLP branch (even channels, 0-based 1,3,5,…); the two branch
//! outputs are concatenated back (channel branch first) and added to X′
//! through a skip connection. Concatenating in block order rather than
//! re-interleaving is what shuffles the channels across branches.
//!
//! The spatial MLP mixes over flattened h·w positions, so its weights bind
//! the block to one input resolution; inputs with a different resolution
//! are rejected.

use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, BufferVisitor, Conv2dLayer, Mode, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Rng, Tape, Tensor};

/// Splits an even-channel NCHW tensor into (odd-index, even-index) halves
/// (1-based channel parity; 0-based indices 0,2,4,… and 1,3,5,…).
pub fn parity_split(tape: &mut Tape, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let xc = tape.stride_channels(x, 0)?;
    let xs = tape.stride_channels(x, 1)?;
    Ok((xc, xs))
}

pub struct PConvMlpBlock {
    pub down_conv: Conv2dLayer,
    pub down_bn: BatchNormLayer,
    pub conv: Conv2dLayer,
    pub bn: BatchNormLayer,
    // Dense weights stored (in × out); y_row = x_row · W + b.
    pub w1c: Tensor,
    pub b1c: Tensor,
    pub w2c: Tensor,
    pub b2c: Tensor,
    pub w1s: Tensor,
    pub b1s: Tensor,
    pub w2s: Tensor,
    pub b2s: Tensor,
    c_in: usize,
    in_h: usize,
    in_w: usize,
    n: usize,
    h_c: usize,
    h_s: usize,
}

impl Clone for PConvMlpBlock {
    fn clone(&self) -> Self {
        PConvMlpBlock {
            down_conv: self.down_conv.clone(),
            down_bn: self.down_bn.clone(),
            conv: self.conv.clone(),
            bn: self.bn.clone(),
            w1c: self.w1c.clone(),
            b1c: self.b1c.clone(),
            w2c: self.w2c.clone(),
            b2c: self.b2c.clone(),
            w1s: self.w1s.clone(),
            b1s: self.b1s.clone(),
            w2s: self.w2s.clone(),
            b2s: self.b2s.clone(),
            c_in: self.c_in,
            in_h: self.in_h,
            in_w: self.in_w,
            n: self.n,
            h_c: self.h_c,
            h_s: self.h_s,
        }
    }
}

impl PConvMlpBlock {
    /// Builds a block for inputs of shape (b, c_in, in_h, in_w). `h_c` and
    /// `h_s` are the channel/spatial MLP hidden widths.
    pub fn new(
        c_in: usize,
        in_h: usize,
        in_w: usize,
        h_c: usize,
        h_s: usize,
        rng: &mut Rng,
    ) -> Result<PConvMlpBlock> {
        if !in_h.is_multiple_of(2) || !in_w.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "pconvmlp input resolution {in_h}×{in_w} must be even"
            )));
        }
        let n = (in_h / 2) * (in_w / 2);
        let std = crate::nn::INIT_STD;
        Ok(PConvMlpBlock {
            down_conv: Conv2dLayer::new(c_in, 2 * c_in, 3, 2, 1, rng),
            down_bn: BatchNormLayer::new(2 * c_in),
            conv: Conv2dLayer::new(2 * c_in, 2 * c_in, 3, 1, 1, rng),
            bn: BatchNormLayer::new(2 * c_in),
            w1c: Tensor::randn_param(&[c_in, h_c], 0.0, std, rng),
            b1c: Tensor::zeros_param(&[h_c]),
            w2c: Tensor::randn_param(&[h_c, c_in], 0.0, std, rng),
            b2c: Tensor::zeros_param(&[c_in]),
            w1s: Tensor::randn_param(&[n, h_s], 0.0, std, rng),
            b1s: Tensor::zeros_param(&[h_s]),
            w2s: Tensor::randn_param(&[h_s, n], 0.0, std, rng),
            b2s: Tensor::zeros_param(&[n]),
            c_in,
            in_h,
            in_w,
            n,
            h_c,
            h_s,
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        2 * self.c_in
    }

    /// Bound number of post-downsample spatial sites.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn hidden_dims(&self) -> (usize, usize) {
        (self.h_c, self.h_s)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match *x.shape() {
            [_, c, h, w] if c == self.c_in && h == self.in_h && w == self.in_w => Ok(()),
            _ => Err(Error::dim(
                "pconvmlp",
                format!(
                    "input {:?} does not match block binding ({}, {}, {}) with n = {}",
                    x.shape(),
                    self.c_in,
                    self.in_h,
                    self.in_w,
                    self.n
                ),
            )),
        }
    }

    /// X′ = conv(downConv(x)) with BN + ReLU after each conv.
    pub fn conv_encode(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let y = self.down_conv.forward(tape, x)?;
        let y = self.down_bn.forward(tape, &y, mode)?;
        let y = tape.relu(&y)?;
        let y = self.conv.forward(tape, &y)?;
        let y = self.bn.forward(tape, &y, mode)?;
        tape.relu(&y)
    }

    /// Two-layer dense with GELU over the last axis of a (rows × in) view.
    fn mlp2(
        tape: &mut Tape,
        x2d: &Tensor,
        w1: &Tensor,
        b1: &Tensor,
        w2: &Tensor,
        b2: &Tensor,
    ) -> Result<Tensor> {
        let h = tape.matmul(x2d, w1)?;
        let h = tape.add_rowvec(&h, b1)?;
        let h = tape.gelu(&h)?;
        let y = tape.matmul(&h, w2)?;
        tape.add_rowvec(&y, b2)
    }

    /// Channel MLP on X_c (per spatial site) and spatial MLP on X_s (per
    /// channel), both at the post-downsample resolution.
    pub fn parallel_mlps(
        &self,
        tape: &mut Tape,
        xc: &Tensor,
        xs: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let [b, c, h, w] = *xc.shape() else {
            return Err(Error::dim("pconvmlp", format!("expected NCHW, got {:?}", xc.shape())));
        };
        if h * w != self.n || c != self.c_in {
            return Err(Error::dim(
                "pconvmlp",
                format!(
                    "branch input {:?} does not match bound n = {} (c = {})",
                    xc.shape(),
                    self.n,
                    self.c_in
                ),
            ));
        }
        if xs.shape() != xc.shape() {
            return Err(Error::dim(
                "pconvmlp",
                format!("branch shapes differ: {:?} vs {:?}", xc.shape(), xs.shape()),
            ));
        }
        let n = self.n;

        // (b,c,h,w) → (b·n, c): channel vectors per spatial site.
        let fc = tape.reshape(xc, &[b, c, n])?;
        let fc = tape.transpose_last2(&fc)?;
        let fc = tape.reshape(&fc, &[b * n, c])?;
        let fc = Self::mlp2(tape, &fc, &self.w1c, &self.b1c, &self.w2c, &self.b2c)?;
        let fc = tape.reshape(&fc, &[b, n, c])?;
        let fc = tape.transpose_last2(&fc)?;
        let fc = tape.reshape(&fc, &[b, c, h, w])?;

        // (b,c,h,w) → (b·c, n): site vectors per channel.
        let fs = tape.reshape(xs, &[b * c, n])?;
        let fs = Self::mlp2(tape, &fs, &self.w1s, &self.b1s, &self.w2s, &self.b2s)?;
        let fs = tape.reshape(&fs, &[b, c, h, w])?;

        Ok((fc, fs))
    }

    /// Full block: X′ + Cat(channel branch, spatial branch).
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let x_prime = self.conv_encode(tape, x, mode)?;
        let (xc, xs) = parity_split(tape, &x_prime)?;
        let (fc, fs) = self.parallel_mlps(tape, &xc, &xs)?;
        let cat = tape.concat(&[&fc, &fs], 1)?;
        tape.add(&x_prime, &cat)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor) {
        self.down_conv.visit_params(&format!("{prefix}.down_conv"), f);
        self.down_bn.visit_params(&format!("{prefix}.down_bn"), f);
        self.conv.visit_params(&format!("{prefix}.conv"), f);
        self.bn.visit_params(&format!("{prefix}.bn"), f);
        for (name, t) in [
            ("w1c", &self.w1c),
            ("b1c", &self.b1c),
            ("w2c", &self.w2c),
            ("b2c", &self.b2c),
            ("w1s", &self.w1s),
            ("b1s", &self.b1s),
            ("w2s", &self.w2s),
            ("b2s", &self.b2s),
        ] {
            f(&format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.down_conv.visit_params_mut(&format!("{prefix}.down_conv"), f);
        self.down_bn.visit_params_mut(&format!("{prefix}.down_bn"), f);
        self.conv.visit_params_mut(&format!("{prefix}.conv"), f);
        self.bn.visit_params_mut(&format!("{prefix}.bn"), f);
        for (name, t) in [
            ("w1c", &mut self.w1c),
            ("b1c", &mut self.b1c),
            ("w2c", &mut self.w2c),
            ("b2c", &mut self.b2c),
            ("w1s", &mut self.w1s),
            ("b1s", &mut self.b1s),
            ("w2s", &mut self.w2s),
            ("b2s", &mut self.b2s),
        ] {
            f(&format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut BufferVisitor) {
        self.down_bn.visit_buffers(&format!("{prefix}.down_bn"), f);
        self.bn.visit_buffers(&format!("{prefix}.bn"), f);
    }

    /// Replaces every MLP weight and bias with zeros (test hook for the
    /// residual-identity property).
    pub fn zero_mlps(&mut self) {
        for t in [
            &mut self.w1c,
            &mut self.b1c,
            &mut self.w2c,
            &mut self.b2c,
            &mut self.w1s,
            &mut self.b1s,
            &mut self.w2s,
            &mut self.b2s,
        ] {
            *t = Tensor::zeros_param(t.shape());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(c: usize, h: usize, w: usize) -> PConvMlpBlock {
        let mut rng = Rng::new(7, "pconvmlp-test");
        PConvMlpBlock::new(c, h, w, c, (h / 2) * (w / 2), &mut rng).unwrap()
    }

    #[test]
    fn shape_law_doubles_channels_halves_spatial() {
        let blk = block(4, 8, 8);
        let mut tape = Tape::no_grad();
        let x = Tensor::randn(&[2, 4, 8, 8], 0.0, 1.0, &mut Rng::new(1, "x"));
        let y = blk.forward(&mut tape, &x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 8, 4, 4]);
    }

    #[test]
    fn resolution_mismatch_is_rejected_naming_n() {
        let blk = block(4, 8, 8);
        let mut tape = Tape::no_grad();
        let x = Tensor::zeros(&[1, 4, 16, 16]);
        let err = blk.forward(&mut tape, &x, Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("n = 16"), "{err}");
    }

    #[test]
    fn zero_mlps_reduce_to_conv_encode_bit_exactly() {
        let mut blk = block(4, 8, 8);
        blk.zero_mlps();
        let x = Tensor::randn(&[1, 4, 8, 8], 0.0, 1.0, &mut Rng::new(2, "x"));
        let mut tape = Tape::no_grad();
        let full = blk.forward(&mut tape, &x, Mode::Eval).unwrap();
        let enc = blk.conv_encode(&mut tape, &x, Mode::Eval).unwrap();
        assert_eq!(full.data(), enc.data());
    }

    #[test]
    fn all_zero_input_with_zero_bias_encodes_to_zero() {
        let blk = block(4, 8, 8);
        let mut tape = Tape::no_grad();
        let x = Tensor::zeros(&[1, 4, 8, 8]);
        let y = blk.conv_encode(&mut tape, &x, Mode::Eval).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mlp_is_local_per_site_and_spatial_per_channel() {
        let blk = block(3, 4, 4); // branch inputs are 3×2×2, n = 4
        let base_c = Tensor::randn(&[1, 3, 2, 2], 0.0, 1.0, &mut Rng::new(3, "xc"));
        let base_s = Tensor::randn(&[1, 3, 2, 2], 0.0, 1.0, &mut Rng::new(4, "xs"));
        let mut tape = Tape::no_grad();
        let (fc0, fs0) = blk.parallel_mlps(&mut tape, &base_c, &base_s).unwrap();

        // Perturb one spatial site of the channel branch: only that site moves.
        let mut bumped = base_c.data().to_vec();
        bumped[2] += 1.0; // channel 0, site 2
        let bumped = Tensor::from_vec(bumped, base_c.shape()).unwrap();
        let (fc1, _) = blk.parallel_mlps(&mut tape, &bumped, &base_s).unwrap();
        for (i, (a, b)) in fc0.data().iter().zip(fc1.data()).enumerate() {
            let site = i % 4;
            if site == 2 {
                continue;
            }
            assert_eq!(a, b, "site {site} moved");
        }

        // Perturb one channel of the spatial branch: only that channel moves.
        let mut bumped = base_s.data().to_vec();
        bumped[4] += 1.0; // channel 1, site 0
        let bumped = Tensor::from_vec(bumped, base_s.shape()).unwrap();
        let (_, fs1) = blk.parallel_mlps(&mut tape, &base_c, &bumped).unwrap();
        for (i, (a, b)) in fs0.data().iter().zip(fs1.data()).enumerate() {
            let ch = (i / 4) % 3;
            if ch == 1 {
                continue;
            }
            assert_eq!(a, b, "channel {ch} moved");
        }
    }
}
