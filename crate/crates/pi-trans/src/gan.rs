//! Conditional patch discriminators and the four-term training objective
//! (L = λ1·L1 + λ_cGAN·L_cGAN + λ_tv·L_tv + λ_per·L_per with weights
//! 100 / 5 / 1 / 50).
//!
//! Each discriminator scores (aerial, candidate) pairs as a logit map; one
//! covers the direct output, one the fused output. The perceptual term uses
//! a frozen random-weight feature extractor behind [`PerceptualExtractor`],
//! so it is fully self-contained and reproducible; a pretrained extractor
//! can replace it without touching the loss plumbing.

use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, BufferVisitor, Conv2dLayer, Mode, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Rng, Tape, Tensor};

/// Objective weights; defaults are the training recipe's exact values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l1: f32,
    pub cgan: f32,
    pub tv: f32,
    pub per: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 100.0, cgan: 5.0, tv: 1.0, per: 50.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.l1 <= 0.0 || self.cgan <= 0.0 || self.tv <= 0.0 || self.per <= 0.0 {
            return Err(Error::Config("loss weights must all be positive".to_string()));
        }
        Ok(())
    }
}

/// Stage widths of a patch discriminator. Convs are k4/p1: stride 2 for
/// every stage except the last, which is stride 1, then a final 1-channel
/// stride-1 conv. BN + LeakyReLU(0.2) on every stage after the first.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub widths: Vec<usize>,
}

impl DiscriminatorConfig {
    /// Full-scale default: the pix2pix stack at half width, which keeps the
    /// whole model's MAC budget in the reported regime.
    pub fn full() -> DiscriminatorConfig {
        DiscriminatorConfig { widths: vec![32, 64, 128, 256] }
    }

    /// The unscaled 70×70-receptive-field pix2pix stack.
    pub fn pix2pix() -> DiscriminatorConfig {
        DiscriminatorConfig { widths: vec![64, 128, 256, 512] }
    }

    /// Desk-scale: three narrow stages.
    pub fn desk() -> DiscriminatorConfig {
        DiscriminatorConfig { widths: vec![8, 16, 32] }
    }
}

pub struct PatchDiscriminator {
    stages: Vec<(Conv2dLayer, Option<BatchNormLayer>)>,
    final_conv: Conv2dLayer,
}

impl Clone for PatchDiscriminator {
    fn clone(&self) -> Self {
        PatchDiscriminator {
            stages: self.stages.clone(),
            final_conv: self.final_conv.clone(),
        }
    }
}

impl PatchDiscriminator {
    pub fn new(cfg: &DiscriminatorConfig, rng: &mut Rng) -> Result<PatchDiscriminator> {
        if cfg.widths.is_empty() {
            return Err(Error::Config("discriminator needs at least one stage".to_string()));
        }
        let mut stages = Vec::new();
        let mut c_in = 6;
        let last = cfg.widths.len() - 1;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let stride = if i == last { 1 } else { 2 };
            let conv = Conv2dLayer::new(c_in, w, 4, stride, 1, rng);
            let bn = (i > 0).then(|| BatchNormLayer::new(w));
            stages.push((conv, bn));
            c_in = w;
        }
        Ok(PatchDiscriminator { stages, final_conv: Conv2dLayer::new(c_in, 1, 4, 1, 1, rng) })
    }

    /// Logit map over (aerial, candidate) patch pairs.
    pub fn forward(&self, tape: &mut Tape, i_a: &Tensor, i_x: &Tensor, mode: Mode) -> Result<Tensor> {
        if i_a.shape() != i_x.shape() {
            return Err(Error::dim(
                "discriminator",
                format!("pair shapes differ: {:?} vs {:?}", i_a.shape(), i_x.shape()),
            ));
        }
        let mut y = tape.concat(&[i_a, i_x], 1)?;
        for (conv, bn) in &self.stages {
            y = conv.forward(tape, &y)?;
            if let Some(bn) = bn {
                y = bn.forward(tape, &y, mode)?;
            }
            y = tape.leaky_relu(&y, 0.2)?;
        }
        self.final_conv.forward(tape, &y)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor) {
        for (i, (conv, bn)) in self.stages.iter().enumerate() {
            conv.visit_params(&format!("{prefix}.conv{}", i + 1), f);
            if let Some(bn) = bn {
                bn.visit_params(&format!("{prefix}.bn{}", i + 1), f);
            }
        }
        self.final_conv.visit_params(&format!("{prefix}.out"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        for (i, (conv, bn)) in self.stages.iter_mut().enumerate() {
            conv.visit_params_mut(&format!("{prefix}.conv{}", i + 1), f);
            if let Some(bn) = bn {
                bn.visit_params_mut(&format!("{prefix}.bn{}", i + 1), f);
            }
        }
        self.final_conv.visit_params_mut(&format!("{prefix}.out"), f);
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut BufferVisitor) {
        for (i, (_, bn)) in self.stages.iter().enumerate() {
            if let Some(bn) = bn {
                bn.visit_buffers(&format!("{prefix}.bn{}", i + 1), f);
            }
        }
    }

    /// Zeroes all weights and biases (test hook: zero logits everywhere).
    pub fn zero_weights(&mut self) {
        self.visit_params_mut("d", &mut |_, t| *t = Tensor::zeros_param(t.shape()));
    }

    /// Walks the conv stack in forward order (profiler hook).
    pub fn trace_layers(&self, f: &mut dyn FnMut(&str, &Conv2dLayer, Option<&BatchNormLayer>)) {
        for (i, (conv, bn)) in self.stages.iter().enumerate() {
            f(&format!("conv{}", i + 1), conv, bn.as_ref());
        }
        f("out", &self.final_conv, None);
    }
}

/// Vanilla GAN losses from real/fake logit maps:
/// d = BCE(σ(real), 1) + BCE(σ(fake), 0), g = BCE(σ(fake), 1).
pub fn adversarial_loss(tape: &mut Tape, logits_real: &Tensor, logits_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    if logits_real.shape() != logits_fake.shape() {
        return Err(Error::dim(
            "adversarial_loss",
            format!("logit shapes differ: {:?} vs {:?}", logits_real.shape(), logits_fake.shape()),
        ));
    }
    let d_real = tape.bce_with_logits(logits_real, 1.0)?;
    let d_fake = tape.bce_with_logits(logits_fake, 0.0)?;
    let d_loss = tape.add(&d_real, &d_fake)?;
    let g_loss = tape.bce_with_logits(logits_fake, 1.0)?;
    Ok((d_loss, g_loss))
}

/// Seed of the published frozen perceptual weights.
pub const PERCEPTUAL_SEED: u64 = 1009;

/// Three frozen conv+ReLU stages (3 → 16 → 32 → 64, k3/s2/p1) with weights
/// drawn once from the deterministic PRNG at [`PERCEPTUAL_SEED`]. The
/// weights are plain (untracked) tensors: gradients flow to the images,
/// never to the extractor.
pub struct PerceptualExtractor {
    convs: [Conv2dLayer; 3],
}

impl Clone for PerceptualExtractor {
    fn clone(&self) -> Self {
        PerceptualExtractor { convs: self.convs.clone() }
    }
}

impl PerceptualExtractor {
    pub fn new() -> PerceptualExtractor {
        let make = |c_in: usize, c_out: usize, i: usize| Conv2dLayer {
            weight: Tensor::randn(
                &[c_out, c_in, 3, 3],
                0.0,
                crate::nn::INIT_STD,
                &mut Rng::new(PERCEPTUAL_SEED, &format!("perceptual.conv{i}.weight")),
            ),
            bias: Tensor::zeros(&[c_out]),
            stride: 2,
            padding: 1,
        };
        PerceptualExtractor { convs: [make(3, 16, 1), make(16, 32, 2), make(32, 64, 3)] }
    }

    /// The three stage features of an image.
    pub fn features(&self, tape: &mut Tape, x: &Tensor) -> Result<[Tensor; 3]> {
        let y1 = self.convs[0].forward(tape, x)?;
        let y1 = tape.relu(&y1)?;
        let y2 = self.convs[1].forward(tape, &y1)?;
        let y2 = tape.relu(&y2)?;
        let y3 = self.convs[2].forward(tape, &y2)?;
        let y3 = tape.relu(&y3)?;
        Ok([y1, y2, y3])
    }
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        PerceptualExtractor::new()
    }
}

/// Sum over stages of the mean squared feature difference.
pub fn perceptual_loss(tape: &mut Tape, a: &Tensor, b: &Tensor, ext: &PerceptualExtractor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "perceptual_loss",
            format!("input shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let fa = ext.features(tape, a)?;
    let fb = ext.features(tape, b)?;
    let mut total = tape.mse_loss(&fa[0], &fb[0])?;
    for i in 1..3 {
        let mi = tape.mse_loss(&fa[i], &fb[i])?;
        total = tape.add(&total, &mi)?;
    }
    Ok(total)
}

/// All scalars of one objective evaluation; every field is a live tape
/// tensor so either total can be backpropagated.
pub struct Objective {
    pub l1: Tensor,
    pub cgan_g: Tensor,
    pub tv: Tensor,
    pub per: Tensor,
    pub g_total: Tensor,
    pub d_total: Tensor,
}

/// The full objective: L1 on both outputs, generator-side adversarial terms
/// from both discriminators, TV on the fused output only, perceptual on
/// (fused, target). Discriminator losses use detached fakes.
#[allow(clippy::too_many_arguments)]
pub fn total_objective(
    tape: &mut Tape,
    direct: &Tensor,
    fused: &Tensor,
    target: &Tensor,
    aerial: &Tensor,
    d_direct: &PatchDiscriminator,
    d_final: &PatchDiscriminator,
    ext: &PerceptualExtractor,
    w: &LossWeights,
    mode: Mode,
) -> Result<Objective> {
    let l1_dir = tape.l1_loss(direct, target)?;
    let l1_fus = tape.l1_loss(fused, target)?;
    let l1 = tape.add(&l1_dir, &l1_fus)?;

    // Discriminator side, on detached fakes.
    let real_dir = d_direct.forward(tape, aerial, target, mode)?;
    let fake_dir_det = d_direct.forward(tape, aerial, &direct.detach(), mode)?;
    let (d_dir, _) = adversarial_loss(tape, &real_dir, &fake_dir_det)?;
    let real_fin = d_final.forward(tape, aerial, target, mode)?;
    let fake_fin_det = d_final.forward(tape, aerial, &fused.detach(), mode)?;
    let (d_fin, _) = adversarial_loss(tape, &real_fin, &fake_fin_det)?;
    let d_total = tape.add(&d_dir, &d_fin)?;

    // Generator side, through live fakes.
    let fake_dir = d_direct.forward(tape, aerial, direct, mode)?;
    let g_dir = tape.bce_with_logits(&fake_dir, 1.0)?;
    let fake_fin = d_final.forward(tape, aerial, fused, mode)?;
    let g_fin = tape.bce_with_logits(&fake_fin, 1.0)?;
    let cgan_g = tape.add(&g_dir, &g_fin)?;

    let tv = tape.tv_loss(fused)?;
    let per = perceptual_loss(tape, fused, target, ext)?;

    let g_total = combine(tape, w, &l1, &cgan_g, &tv, &per)?;
    Ok(Objective { l1, cgan_g, tv, per, g_total, d_total })
}

/// λ1·l1 + λ_cGAN·cgan + λ_tv·tv + λ_per·per on the tape.
pub fn combine(
    tape: &mut Tape,
    w: &LossWeights,
    l1: &Tensor,
    cgan: &Tensor,
    tv: &Tensor,
    per: &Tensor,
) -> Result<Tensor> {
    let a = tape.scale(l1, w.l1)?;
    let b = tape.scale(cgan, w.cgan)?;
    let c = tape.scale(tv, w.tv)?;
    let d = tape.scale(per, w.per)?;
    let ab = tape.add(&a, &b)?;
    let abc = tape.add(&ab, &c)?;
    tape.add(&abc, &d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discriminator_shape_trace_256_and_64() {
        // Trace depends only on stage count; narrow widths keep this fast.
        let cfg = DiscriminatorConfig { widths: vec![8, 16, 32, 64] };
        let d = PatchDiscriminator::new(&cfg, &mut Rng::new(0, "d")).unwrap();
        let mut tape = Tape::no_grad();
        let a = Tensor::zeros(&[1, 3, 256, 256]);
        let y = d.forward(&mut tape, &a, &a, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 30, 30]);

        let a = Tensor::zeros(&[1, 3, 64, 64]);
        let y = d.forward(&mut tape, &a, &a, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 6, 6]);
    }

    #[test]
    fn desk_discriminator_trace() {
        let d = PatchDiscriminator::new(&DiscriminatorConfig::desk(), &mut Rng::new(0, "d")).unwrap();
        let mut tape = Tape::no_grad();
        let a = Tensor::zeros(&[2, 3, 64, 64]);
        let y = d.forward(&mut tape, &a, &a, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 1, 14, 14]);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut d = PatchDiscriminator::new(&DiscriminatorConfig::desk(), &mut Rng::new(1, "d")).unwrap();
        d.zero_weights();
        let mut tape = Tape::no_grad();
        let a = Tensor::randn(&[1, 3, 64, 64], 0.0, 1.0, &mut Rng::new(2, "x"));
        let y = d.forward(&mut tape, &a, &a, Mode::Eval).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adversarial_loss_reference_points() {
        let mut tape = Tape::no_grad();
        let zeros = Tensor::zeros(&[1, 1, 3, 3]);
        let (d, g) = adversarial_loss(&mut tape, &zeros, &zeros).unwrap();
        assert!((d.item() - 2.0 * std::f32::consts::LN_2).abs() < 1e-6);
        assert!((g.item() - std::f32::consts::LN_2).abs() < 1e-6);

        // Perfect discriminator limit.
        let big = Tensor::full(&[1], 40.0);
        let small = Tensor::full(&[1], -40.0);
        let (d, _) = adversarial_loss(&mut tape, &big, &small).unwrap();
        assert!(d.item() < 1e-6);

        // Hand-evaluated: −ln σ(2) − ln(1 − σ(−1)).
        let real = Tensor::from_vec(vec![2.0], &[1]).unwrap();
        let fake = Tensor::from_vec(vec![-1.0], &[1]).unwrap();
        let (d, _) = adversarial_loss(&mut tape, &real, &fake).unwrap();
        assert!((d.item() - 0.44019).abs() < 1e-5, "{}", d.item());
    }

    #[test]
    fn perceptual_loss_basic_properties() {
        let ext = PerceptualExtractor::new();
        let mut tape = Tape::no_grad();
        let a = Tensor::randn(&[1, 3, 8, 8], 0.0, 0.5, &mut Rng::new(3, "a"));
        let b = Tensor::randn(&[1, 3, 8, 8], 0.0, 0.5, &mut Rng::new(4, "b"));
        assert_eq!(perceptual_loss(&mut tape, &a, &a, &ext).unwrap().item(), 0.0);
        let ab = perceptual_loss(&mut tape, &a, &b, &ext).unwrap().item();
        let ba = perceptual_loss(&mut tape, &b, &a, &ext).unwrap().item();
        assert_eq!(ab, ba);
        assert!(ab > 0.0);
    }

    #[test]
    fn weighted_sum_arithmetic() {
        let mut tape = Tape::no_grad();
        let w = LossWeights::default();
        let total = combine(
            &mut tape,
            &w,
            &Tensor::scalar(0.2),
            &Tensor::scalar(0.7),
            &Tensor::scalar(0.05),
            &Tensor::scalar(0.1),
        )
        .unwrap();
        assert!((total.item() - 28.55).abs() < 1e-5);
    }

    #[test]
    fn objective_on_identical_images_with_zero_logit_discriminators() {
        let mut d1 = PatchDiscriminator::new(&DiscriminatorConfig::desk(), &mut Rng::new(5, "d1")).unwrap();
        let mut d2 = PatchDiscriminator::new(&DiscriminatorConfig::desk(), &mut Rng::new(6, "d2")).unwrap();
        d1.zero_weights();
        d2.zero_weights();
        let ext = PerceptualExtractor::new();
        let img = Tensor::full(&[1, 3, 64, 64], 0.25);
        let mut tape = Tape::no_grad();
        let obj = total_objective(
            &mut tape,
            &img,
            &img,
            &img,
            &img,
            &d1,
            &d2,
            &ext,
            &LossWeights::default(),
            Mode::Eval,
        )
        .unwrap();
        assert_eq!(obj.l1.item(), 0.0);
        assert_eq!(obj.tv.item(), 0.0);
        assert_eq!(obj.per.item(), 0.0);
        let expect = 5.0 * 2.0 * std::f32::consts::LN_2;
        assert!((obj.g_total.item() - expect).abs() < 1e-5, "{}", obj.g_total.item());
        assert!((obj.d_total.item() - 4.0 * std::f32::consts::LN_2).abs() < 1e-5);
    }
}
