//! Full generator: two encoder branches, a direct-translation decoder and a
//! semantically-fused decoder.
//!
//! Feature levels follow the fixed dimension law — L1 (c, H/2), L2 (2c,
//! H/4), L3 (4c, H/8), L4 (8c, H/16) — for stem width c. The aerial branch
//! feeds the direct decoder (upsample L4→L3→L2→H/2→H, then a decoder head
//! producing I_g′); it never sees the semantic map. The fused decoder runs
//! the implicit-transformation chain with semantic features as queries and
//! the direct branch's levels as keys, then decodes the same way into I_g″.
//!
//! Ablation variants: A swaps every Conv-MLP stage for its bare conv pair
//! and drops the attention chain, E keeps Conv-MLP stages but drops
//! attention, F is the full model.

use crate::error::{Error, Result};
use crate::itm::{level_chain_forward, ImplicitTransformModule};
use crate::nn::{
    BatchNormLayer, BufferVisitor, Conv2dLayer, DecoderHead, EncoderStem, Mode, ParamVisitor,
    ParamVisitorMut, UpsampleBlock,
};
use crate::pconvmlp::PConvMlpBlock;
use crate::tensor::{Rng, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderVariant {
    PConvMlp,
    BasicConv,
}

/// Named ablation points: A = bare convs, E = Conv-MLP encoders only,
/// F = full model with the attention chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    A,
    E,
    F,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "A" | "a" | "basic_conv" => Ok(Variant::A),
            "E" | "e" | "pconvmlp" => Ok(Variant::E),
            "F" | "f" | "full" => Ok(Variant::F),
            other => Err(Error::Config(format!("unknown variant '{other}' (expected A, E or F)"))),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::E => "E",
            Variant::F => "F",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    /// Square input resolution H = W; must be divisible by 16.
    pub image_size: usize,
    /// Channel width at level L1 (the stem output); must be even.
    pub c_l1: usize,
    /// Channel-MLP hidden width as a multiple of the branch width.
    pub hc_mult: usize,
    /// Spatial-MLP hidden width cap: h_s = min(n, hs_cap).
    pub hs_cap: usize,
    /// Scale attention scores by 1/sqrt(c/4) (off by default).
    pub scale_scores: bool,
    pub encoder_variant: EncoderVariant,
    pub use_itm: bool,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Full-scale configuration (256×256, c = 32).
    pub fn full() -> GeneratorConfig {
        GeneratorConfig {
            image_size: 256,
            c_l1: 32,
            hc_mult: 1,
            hs_cap: 1024,
            scale_scores: false,
            encoder_variant: EncoderVariant::PConvMlp,
            use_itm: true,
            seed: 0,
        }
    }

    /// Desk-scale configuration (64×64, c = 8).
    pub fn desk() -> GeneratorConfig {
        GeneratorConfig { image_size: 64, c_l1: 8, ..GeneratorConfig::full() }
    }

    pub fn with_variant(mut self, v: Variant) -> GeneratorConfig {
        match v {
            Variant::A => {
                self.encoder_variant = EncoderVariant::BasicConv;
                self.use_itm = false;
            }
            Variant::E => {
                self.encoder_variant = EncoderVariant::PConvMlp;
                self.use_itm = false;
            }
            Variant::F => {
                self.encoder_variant = EncoderVariant::PConvMlp;
                self.use_itm = true;
            }
        }
        self
    }

    pub fn variant(&self) -> Variant {
        match (self.encoder_variant, self.use_itm) {
            (EncoderVariant::BasicConv, _) => Variant::A,
            (EncoderVariant::PConvMlp, false) => Variant::E,
            (EncoderVariant::PConvMlp, true) => Variant::F,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        if self.c_l1 < 2 || !self.c_l1.is_multiple_of(2) {
            return Err(Error::Config(format!("c_l1 {} must be even and ≥ 2", self.c_l1)));
        }
        if self.use_itm && !(2 * self.c_l1).is_multiple_of(4) {
            return Err(Error::Config(format!(
                "c_l1 {} gives L2 width {} not divisible by 4 (required by attention)",
                self.c_l1,
                2 * self.c_l1
            )));
        }
        if self.hc_mult == 0 || self.hs_cap == 0 {
            return Err(Error::Config("hidden dims must be positive".to_string()));
        }
        Ok(())
    }

    /// Channel widths at L1..L4.
    pub fn level_channels(&self) -> [usize; 4] {
        [self.c_l1, 2 * self.c_l1, 4 * self.c_l1, 8 * self.c_l1]
    }

    /// Spatial side lengths at L1..L4.
    pub fn level_sizes(&self) -> [usize; 4] {
        [
            self.image_size / 2,
            self.image_size / 4,
            self.image_size / 8,
            self.image_size / 16,
        ]
    }
}

/// Eq.-1-only encoder stage (strided conv + conv, BN + ReLU each): the
/// "Basic Conv" ablation substitute.
#[derive(Clone)]
pub struct BasicConvBlock {
    pub down_conv: Conv2dLayer,
    pub down_bn: BatchNormLayer,
    pub conv: Conv2dLayer,
    pub bn: BatchNormLayer,
}

impl BasicConvBlock {
    pub fn new(c_in: usize, rng: &mut Rng) -> BasicConvBlock {
        BasicConvBlock {
            down_conv: Conv2dLayer::new(c_in, 2 * c_in, 3, 2, 1, rng),
            down_bn: BatchNormLayer::new(2 * c_in),
            conv: Conv2dLayer::new(2 * c_in, 2 * c_in, 3, 1, 1, rng),
            bn: BatchNormLayer::new(2 * c_in),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.down_conv.forward(tape, x)?;
        let y = self.down_bn.forward(tape, &y, mode)?;
        let y = tape.relu(&y)?;
        let y = self.conv.forward(tape, &y)?;
        let y = self.bn.forward(tape, &y, mode)?;
        tape.relu(&y)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor) {
        self.down_conv.visit_params(&format!("{prefix}.down_conv"), f);
        self.down_bn.visit_params(&format!("{prefix}.down_bn"), f);
        self.conv.visit_params(&format!("{prefix}.conv"), f);
        self.bn.visit_params(&format!("{prefix}.bn"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.down_conv.visit_params_mut(&format!("{prefix}.down_conv"), f);
        self.down_bn.visit_params_mut(&format!("{prefix}.down_bn"), f);
        self.conv.visit_params_mut(&format!("{prefix}.conv"), f);
        self.bn.visit_params_mut(&format!("{prefix}.bn"), f);
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut BufferVisitor) {
        self.down_bn.visit_buffers(&format!("{prefix}.down_bn"), f);
        self.bn.visit_buffers(&format!("{prefix}.bn"), f);
    }
}

#[derive(Clone)]
pub enum StageBlock {
    PConvMlp(PConvMlpBlock),
    BasicConv(BasicConvBlock),
}

impl StageBlock {
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            StageBlock::PConvMlp(b) => b.forward(tape, x, mode),
            StageBlock::BasicConv(b) => b.forward(tape, x, mode),
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor) {
        match self {
            StageBlock::PConvMlp(b) => b.visit_params(prefix, f),
            StageBlock::BasicConv(b) => b.visit_params(prefix, f),
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        match self {
            StageBlock::PConvMlp(b) => b.visit_params_mut(prefix, f),
            StageBlock::BasicConv(b) => b.visit_params_mut(prefix, f),
        }
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut BufferVisitor) {
        match self {
            StageBlock::PConvMlp(b) => b.visit_buffers(prefix, f),
            StageBlock::BasicConv(b) => b.visit_buffers(prefix, f),
        }
    }
}

/// Stem plus three halving stages; retains every level feature.
#[derive(Clone)]
pub struct EncoderBranch {
    pub stem: EncoderStem,
    pub stages: Vec<StageBlock>,
}

impl EncoderBranch {
    fn new(cfg: &GeneratorConfig, name: &str) -> Result<EncoderBranch> {
        let c = cfg.c_l1;
        let stem = EncoderStem::new(c, &mut Rng::new(cfg.seed, &format!("{name}.stem")));
        let mut stages = Vec::new();
        for i in 0..3 {
            let c_in = c << i;
            let size = cfg.image_size >> (i + 1);
            let mut rng = Rng::new(cfg.seed, &format!("{name}.stage{}", i + 1));
            let stage = match cfg.encoder_variant {
                EncoderVariant::PConvMlp => {
                    let n = (size / 2) * (size / 2);
                    let h_c = cfg.hc_mult * c_in;
                    let h_s = n.min(cfg.hs_cap);
                    StageBlock::PConvMlp(PConvMlpBlock::new(c_in, size, size, h_c, h_s, &mut rng)?)
                }
                EncoderVariant::BasicConv => StageBlock::BasicConv(BasicConvBlock::new(c_in, &mut rng)),
            };
            stages.push(stage);
        }
        Ok(EncoderBranch { stem, stages })
    }

    /// Every level feature, L1 through L4.
    pub fn forward_levels(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let mut levels = Vec::with_capacity(4);
        let l1 = self.stem.forward(tape, x, mode)?;
        levels.push(l1);
        for stage in &self.stages {
            let next = stage.forward(tape, levels.last().unwrap(), mode)?;
            levels.push(next);
        }
        Ok(levels)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor) {
        self.stem.visit_params(&format!("{prefix}.stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit_params(&format!("{prefix}.stage{}", i + 1), f);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.stem.visit_params_mut(&format!("{prefix}.stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params_mut(&format!("{prefix}.stage{}", i + 1), f);
        }
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut BufferVisitor) {
        self.stem.visit_buffers(&format!("{prefix}.stem"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit_buffers(&format!("{prefix}.stage{}", i + 1), f);
        }
    }
}

/// Upsample L2 → H/2 → H then decode to RGB; both decoders share this shape.
#[derive(Clone)]
pub struct DecoderTail {
    pub up_a: UpsampleBlock,
    pub up_b: UpsampleBlock,
    pub head: DecoderHead,
}

impl DecoderTail {
    fn new(c_l2: usize, seed: u64, name: &str) -> DecoderTail {
        DecoderTail {
            up_a: UpsampleBlock::new(c_l2, c_l2 / 2, &mut Rng::new(seed, &format!("{name}.up_a"))),
            up_b: UpsampleBlock::new(c_l2 / 2, c_l2 / 4, &mut Rng::new(seed, &format!("{name}.up_b"))),
            head: DecoderHead::new(c_l2 / 4, &mut Rng::new(seed, &format!("{name}.head"))),
        }
    }

    fn forward(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.up_a.forward(tape, x, mode)?;
        let y = self.up_b.forward(tape, &y, mode)?;
        self.head.forward(tape, &y, mode)
    }

    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor) {
        self.up_a.visit_params(&format!("{prefix}.up_a"), f);
        self.up_b.visit_params(&format!("{prefix}.up_b"), f);
        self.head.visit_params(&format!("{prefix}.head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.up_a.visit_params_mut(&format!("{prefix}.up_a"), f);
        self.up_b.visit_params_mut(&format!("{prefix}.up_b"), f);
        self.head.visit_params_mut(&format!("{prefix}.head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut BufferVisitor) {
        self.up_a.visit_buffers(&format!("{prefix}.up_a"), f);
        self.up_b.visit_buffers(&format!("{prefix}.up_b"), f);
        self.head.visit_buffers(&format!("{prefix}.head"), f);
    }
}

pub struct GeneratorOutput {
    /// I_g′ — the direct translation (aerial features only).
    pub direct: Tensor,
    /// I_g″ — the semantically-guided output.
    pub fused: Tensor,
}

/// Intermediates retained by a traced forward, for shape audits and tests.
pub struct GeneratorTrace {
    pub aerial_levels: Vec<Tensor>,
    pub semantic_levels: Vec<Tensor>,
    /// Direct-branch features serving as attention keys: L4, L3, L2.
    pub direct_keys: [Tensor; 3],
    pub fused_l2: Tensor,
}

#[derive(Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub enc_aerial: EncoderBranch,
    pub enc_semantic: EncoderBranch,
    pub dir_up43: UpsampleBlock,
    pub dir_up32: UpsampleBlock,
    pub dir_tail: DecoderTail,
    pub itms: Option<[ImplicitTransformModule; 3]>,
    pub fus_up43: UpsampleBlock,
    pub fus_up32: UpsampleBlock,
    pub fus_tail: DecoderTail,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Generator> {
        cfg.validate()?;
        let [_, c2, c3, c4] = cfg.level_channels();
        let seed = cfg.seed;
        let itms = if cfg.use_itm {
            let mut rng = Rng::new(seed, "gen.itm");
            Some([
                ImplicitTransformModule::new(c4, cfg.scale_scores, &mut rng)?,
                ImplicitTransformModule::new(c3, cfg.scale_scores, &mut rng)?,
                ImplicitTransformModule::new(c2, cfg.scale_scores, &mut rng)?,
            ])
        } else {
            None
        };
        Ok(Generator {
            enc_aerial: EncoderBranch::new(&cfg, "gen.enc_a")?,
            enc_semantic: EncoderBranch::new(&cfg, "gen.enc_s")?,
            dir_up43: UpsampleBlock::new(c4, c3, &mut Rng::new(seed, "gen.dir.up43")),
            dir_up32: UpsampleBlock::new(c3, c2, &mut Rng::new(seed, "gen.dir.up32")),
            dir_tail: DecoderTail::new(c2, seed, "gen.dir"),
            itms,
            fus_up43: UpsampleBlock::new(c4, c3, &mut Rng::new(seed, "gen.fus.up43")),
            fus_up32: UpsampleBlock::new(c3, c2, &mut Rng::new(seed, "gen.fus.up32")),
            fus_tail: DecoderTail::new(c2, seed, "gen.fus"),
            cfg,
        })
    }

    fn check_inputs(&self, i_a: &Tensor, s_g: &Tensor) -> Result<()> {
        let s = self.cfg.image_size;
        let ok = matches!(*i_a.shape(), [_, 3, h, w] if h == s && w == s);
        if !ok || i_a.shape() != s_g.shape() {
            return Err(Error::dim(
                "generator",
                format!(
                    "inputs must both be (b, 3, {s}, {s}); got I_a {:?}, S_g {:?}",
                    i_a.shape(),
                    s_g.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, i_a: &Tensor, s_g: &Tensor, mode: Mode) -> Result<GeneratorOutput> {
        self.forward_traced(tape, i_a, s_g, mode).map(|(out, _)| out)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        i_a: &Tensor,
        s_g: &Tensor,
        mode: Mode,
    ) -> Result<(GeneratorOutput, GeneratorTrace)> {
        self.check_inputs(i_a, s_g)?;
        let a_levels = self.enc_aerial.forward_levels(tape, i_a, mode)?;
        let s_levels = self.enc_semantic.forward_levels(tape, s_g, mode)?;

        // Direct branch: L4 root, upsampled levels double as attention keys.
        let fk4 = a_levels[3].clone();
        let fk3 = self.dir_up43.forward(tape, &fk4, mode)?;
        let fk2 = self.dir_up32.forward(tape, &fk3, mode)?;
        let direct = self.dir_tail.forward(tape, &fk2, mode)?;

        // Fused branch: semantic queries against direct keys.
        let fused_l2 = level_chain_forward(
            tape,
            [&s_levels[3], &s_levels[2], &s_levels[1]],
            [&fk4, &fk3, &fk2],
            self.itms.as_ref().map(|m| [&m[0], &m[1], &m[2]]),
            &self.fus_up43,
            &self.fus_up32,
            mode,
        )?;
        let fused = self.fus_tail.forward(tape, &fused_l2, mode)?;

        Ok((
            GeneratorOutput { direct, fused },
            GeneratorTrace {
                aerial_levels: a_levels,
                semantic_levels: s_levels,
                direct_keys: [fk4, fk3, fk2],
                fused_l2,
            },
        ))
    }

    /// The semantic encoder's retained intermediates (L2, L3, L4) — the
    /// query features of the fusion chain.
    pub fn semantic_level_taps(&self, tape: &mut Tape, s_g: &Tensor, mode: Mode) -> Result<[Tensor; 3]> {
        let levels = self.enc_semantic.forward_levels(tape, s_g, mode)?;
        let [_, l2, l3, l4] = <[Tensor; 4]>::try_from(levels).map_err(|_| {
            Error::dim("generator", "encoder produced wrong level count".to_string())
        })?;
        Ok([l2, l3, l4])
    }

    pub fn visit_params(&self, f: &mut ParamVisitor) {
        self.enc_aerial.visit_params("gen.enc_a", f);
        self.enc_semantic.visit_params("gen.enc_s", f);
        self.dir_up43.visit_params("gen.dir.up43", f);
        self.dir_up32.visit_params("gen.dir.up32", f);
        self.dir_tail.visit_params("gen.dir", f);
        if let Some(itms) = &self.itms {
            for (m, level) in itms.iter().zip(["l4", "l3", "l2"]) {
                m.visit_params(&format!("gen.itm.{level}"), f);
            }
        }
        self.fus_up43.visit_params("gen.fus.up43", f);
        self.fus_up32.visit_params("gen.fus.up32", f);
        self.fus_tail.visit_params("gen.fus", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut ParamVisitorMut) {
        self.enc_aerial.visit_params_mut("gen.enc_a", f);
        self.enc_semantic.visit_params_mut("gen.enc_s", f);
        self.dir_up43.visit_params_mut("gen.dir.up43", f);
        self.dir_up32.visit_params_mut("gen.dir.up32", f);
        self.dir_tail.visit_params_mut("gen.dir", f);
        if let Some(itms) = &mut self.itms {
            for (m, level) in itms.iter_mut().zip(["l4", "l3", "l2"]) {
                m.visit_params_mut(&format!("gen.itm.{level}"), f);
            }
        }
        self.fus_up43.visit_params_mut("gen.fus.up43", f);
        self.fus_up32.visit_params_mut("gen.fus.up32", f);
        self.fus_tail.visit_params_mut("gen.fus", f);
    }

    pub fn visit_buffers(&self, f: &mut BufferVisitor) {
        self.enc_aerial.visit_buffers("gen.enc_a", f);
        self.enc_semantic.visit_buffers("gen.enc_s", f);
        self.dir_up43.visit_buffers("gen.dir.up43", f);
        self.dir_up32.visit_buffers("gen.dir.up32", f);
        self.dir_tail.visit_buffers("gen.dir", f);
        self.fus_up43.visit_buffers("gen.fus.up43", f);
        self.fus_up32.visit_buffers("gen.fus.up32", f);
        self.fus_tail.visit_buffers("gen.fus", f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }
}

/// Builds the generator for a config (named for the Table-style A/E/F
/// toggles it applies).
pub fn apply_ablation(cfg: GeneratorConfig) -> Result<Generator> {
    Generator::new(cfg)
}
